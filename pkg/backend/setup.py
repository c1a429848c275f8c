from setuptools import setup, find_packages

setup(
    name="pixmot",
    version="0.1.0",
    description="Desk-scale pixel-space Mixture-of-Transformers toolkit",
    package_dir={"": "src"},
    packages=find_packages(where="src"),
    python_requires=">=3.10",
    install_requires=[
        "numpy",
        "torch",
        "flask",
        "requests",
    ],
    extras_require={
        "test": ["pytest"],
        "serve": ["gunicorn"],
    },
    entry_points={
        "console_scripts": [
            "pixmot=pixmot.__main__:main",
        ],
    },
)
