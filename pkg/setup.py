"""Build the optional Cython kernels.

If Cython or a C compiler is missing the package still installs; the
pure-numpy kernels in ``cpgd_lab._kernels_py`` are used instead.
"""
import os

import numpy as np
from setuptools import setup

ext_modules = []
if os.environ.get("CPGD_LAB_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "cpgd_lab._kernels",
                    ["src/cpgd_lab/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
