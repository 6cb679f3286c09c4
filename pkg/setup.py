from setuptools import setup

setup(
    name="dpo-lab",
    version="0.1.0",
    description="Distillation policy optimization: training loop, estimators and verification oracles",
    packages=["dpo_lab"],
    package_data={"dpo_lab": ["fixtures/*.mdp"]},
    install_requires=[
        "click>=8.1.0",
        "numpy>=1.22",
        "scipy>=1.12",
    ],
    entry_points={
        'console_scripts': [
            'dpo=dpo_lab.cli:main',
        ],
    },
    python_requires=">=3.9",
)
