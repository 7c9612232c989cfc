"""Build script for the optional compiled WKV kernel.

The pure-numpy kernel in ``efficientiml.wkv._reference`` is always available;
if Cython or a C compiler is missing the package installs without the
extension and falls back at import time.
"""
import os

import numpy as np
from setuptools import setup

ext_modules = []
if not os.environ.get("EFFICIENTIML_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "efficientiml.wkv._scan",
                    ["src/efficientiml/wkv/_scan.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": 3,
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
