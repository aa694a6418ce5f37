from setuptools import setup, find_packages

setup(
    name="myoseg",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.26",
        "scipy>=1.11",
        "scikit-image>=0.21",
        "scikit-learn>=1.3",
        "pandas>=2.0",
        "joblib>=1.3",
        "PyWavelets>=1.4",
        "Pillow>=10.0",
        "pydantic>=2.5,<2.10",
        "pydantic-settings==2.2.1",
        "python-dotenv==1.0.1",
        "structlog>=24.1,<25.0",
        "click>=8.1",
    ],
    entry_points={
        "console_scripts": [
            "myoseg=myoseg.cli.main:run",
        ],
    },
)
