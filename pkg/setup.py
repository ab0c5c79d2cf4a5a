from setuptools import setup, find_packages

setup(
    name="deskedit",
    version="0.1.0",
    packages=find_packages(exclude=["examples", "examples.*"]),
    install_requires=[
        "numpy",
        "pandas",
        "pydantic>=2",
        "python-dotenv",
        "click",
        "pillow",
    ],
    extras_require={
        "test": ["pytest"],
    },
    entry_points={
        "console_scripts": [
            "deskedit=deskedit.main:main",
        ],
    },
)
