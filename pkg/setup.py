"""Build script for the optional compiled kernels.

The package works without them: ``esscale.kernels`` falls back to the
pure-Python implementations when ``esscale._ckernels`` cannot be imported.
"""
import os

import numpy as np
from setuptools import Extension, setup

# Bit-exact agreement with the Python fallback needs strict IEEE semantics.
COMPILE_ARGS = [
    "-O2",
    "-fno-fast-math",
    "-ffp-contract=off",
    # gcc otherwise fuses sin+cos into sincos, which rounds differently in glibc
    "-fno-builtin-sin",
    "-fno-builtin-cos",
]


def extensions():
    if os.environ.get("ESSCALE_NO_EXT"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "esscale._ckernels",
        ["src/esscale/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=COMPILE_ARGS,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions())
