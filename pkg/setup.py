from setuptools import setup, find_packages

setup(
    name="minibatch-ot",
    version="1.0.0",
    description="Minibatch optimal transport: estimators, averaged plans, bounds, gradient flows and color transfer",
    packages=find_packages(exclude=["tests", "tests.*"]),
    py_modules=["main"],
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "pandas>=1.4",
        "SQLAlchemy>=2.0.0",
        "opencv-python-headless>=4.6",
        "colorama>=0.4",
    ],
    entry_points={
        "console_scripts": [
            "minibatch-ot=main:main",
        ],
    },
    include_package_data=True,
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Mathematics",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
)
