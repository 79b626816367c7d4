from setuptools import setup, find_packages

setup(
    name="splatrestore",
    version="1.0.0",
    description="Extreme Gaussian-splatting scene compression with one-step diffusion restoration",
    author="splatrestore developers",
    packages=find_packages(include=["splatrestore", "compression", "restoration"]),
    py_modules=["evaluation", "integrated_pipeline", "integrated_cli"],
    install_requires=[
        "python-dotenv>=1.0.0",
        "jsonschema>=4.19.0",
        "numpy>=1.24.0",
        "pandas>=2.0.0",
        "torch>=2.1.0",
        "pydantic>=2.5.3",
        "plyfile>=1.0.0",
        "Pillow>=10.0.0"
    ],
    extras_require={
        "dev": [
            "pytest>=7.4.3",
            "black>=23.11.0",
            "isort>=5.12.0",
            "mypy>=1.6.1",
            "flake8>=6.1.0",
            "pre-commit>=3.5.0"
        ],
    },
    package_data={
        "": ["*.json"],
    },
    data_files=[("config", ["config/pipeline_defaults.json"])],
    entry_points={
        'console_scripts': [
            'splatrestore=integrated_cli:main',
        ],
    },
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.11",
        "Operating System :: OS Independent"
    ],
    python_requires='>=3.10',
)
