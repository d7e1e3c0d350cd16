#!/usr/bin/env python
# -*- coding: utf-8 -*-
try:
    from setuptools import setup
except ImportError:
    from distutils.core import setup

try:
    with open('README.rst') as readme_file:
        readme = readme_file.read()
except FileNotFoundError:
    readme = ''

requirements = [
    'matplotlib',
    'numpy',
    'pystache',
    'scipy>=1.8',
    'pyyaml',
]

test_requirements = [
]

setup(
    name='sessrec',
    version='0.1.0',
    description="Session-wise generative recommendation with iterative preference alignment, "
    "trained and evaluated against a simulated user environment.",
    long_description=readme,
    author="Michal Hozza",
    author_email='mhozza@gmail.com',
    packages=[
        'sessrec',
    ],
    package_dir={
        'sessrec': 'sessrec'
    },
    package_data={
        'sessrec': ['templates/*.tpl'],
    },
    include_package_data=True,
    install_requires=requirements,
    python_requires='>=3.7',
    entry_points={
        'console_scripts': ['sessrec=sessrec.sessrec:run'],
    },
    license='GNU GPLv3',
    zip_safe=False,
    keywords='sessrec recommendation',
    classifiers=[
        'Development Status :: 2 - Pre-Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: GNU General Public License v3 (GPLv3)',
        'Natural Language :: English',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
    test_suite='tests',
    tests_require=test_requirements
)
