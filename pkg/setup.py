from setuptools import setup, find_packages

setup(
    name='Sequence-Density-Workbench',
    version='0.1.0',
    description='Python Package that Trains and Compares Density Models for Multivariate Sequences',
    license='MIT',
    packages=find_packages(exclude=['tests']),
    install_requires=[
        'matplotlib',
        'numpy',
        'scipy',
        'torch',
        'tqdm'
    ],
    extras_require={'test': ['pytest']},
    author='Dr. Alexander Pollak',
    author_email='Alexander.Pollak.87@gmail.com',
    keywords=['density estimation','recurrent networks','variational inference','sequences'],
    entry_points={'console_scripts': ['SequenceWorkbench = SDW.control:main']},
)
