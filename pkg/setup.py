from setuptools import setup


def readme():
    with open("nmfnet/README.rst", encoding="utf-8") as f:
        return f.read()


setup(
    name="nmfnet",
    version="0.1.0",
    description="Neural mean-field learning of diffusion networks",
    long_description=readme(),
    packages=["nmfnet"],
    keywords="diffusion networks influence estimation network inference",
    license="MIT",
    zip_safe=False,
    install_requires=["numpy", "scipy", "pandas", "joblib", "pyyaml", "tqdm"],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["nmf = nmfnet.cli:main"]},
    classifiers=["Programming Language :: Python :: 3.8",],
)
