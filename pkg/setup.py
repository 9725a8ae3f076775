"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a pure-NumPy fallback is selected
at import time), so a failed compilation only costs speed.
"""

import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if not os.path.exists("src/skmc/_kernels_cy.pyx"):
    cythonize = None

if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "skmc._kernels_cy",
                ["src/skmc/_kernels_cy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
else:
    ext_modules = []

setup(ext_modules=ext_modules)
