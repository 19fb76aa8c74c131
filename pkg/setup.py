#!/usr/bin/env python3
"""
tabtoken setup script
Feature-token tabular learner with token-reusing few-shot transfer
"""

from pathlib import Path

from setuptools import find_packages, setup

ROOT = Path(__file__).parent


def read_requirements() -> list:
    requirements = []
    for line in (ROOT / "requirements.txt").read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#") and not line.startswith("pytest"):
            requirements.append(line)
    return requirements


setup(
    name="tabtoken",
    version="0.1.0",
    description="Transferable feature tokens for few-shot tabular learning",
    long_description=(ROOT / "README.md").read_text(encoding="utf-8"),
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*"]),
    package_data={"tabtoken.config": ["*.yaml", "environments/*.yaml"]},
    python_requires=">=3.9",
    install_requires=read_requirements(),
    extras_require={"test": ["pytest==8.2.0"]},
    entry_points={"console_scripts": ["tabtoken=tabtoken.cli:main"]},
)
