from setuptools import setup, find_packages
import importlib.machinery


version = importlib.machinery.SourceFileLoader(
    'dashattn.version', 'dashattn/version.py').load_module()

# dashattn configuration
setup(
    name='dashattn',
    version=version.version,
    description='Reference implementation of entmax-routed block-sparse '
    'attention',
    author='The dashattn contributors',
    packages=find_packages(exclude=['tests']),
    long_description="""A CPU reference library for two-stage sparse """
    """attention: chunk summaries are routed with alpha-entmax and the """
    """selected blocks are attended with a routing prior, together with """
    """hand-derived gradients, dispersion diagnostics and benchmarks""",
    classifiers=[
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python",
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Programming Language :: Python :: 3",
    ],
    keywords='attention sparse entmax transformer',
    license='MIT',
    python_requires='>=3.8',
    install_requires=[
        'numpy >= 1.17.0',
        'scipy >= 1.0.0',
        'joblib',
        'pandas'
    ],
    extras_require={
        'tests': ['pytest'],
        'docs': ['sphinx', 'numpydoc']
    },
    entry_points={
        'console_scripts': ['dashattn=dashattn.cli:main']
    }
)
