import os

import numpy as np
from setuptools import Extension, setup

# The compiled core is optional: without Cython (or with SATLAB_NO_EXT=1) the
# package installs pure-Python and uses the numpy fallback kernels.
ext_modules = []
if not os.environ.get("SATLAB_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        extensions = [
            Extension(
                "satlab._kernels",
                ["src/satlab/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: keeps each product/sum rounding identical
                # to the numpy fallback
                extra_compile_args=["-O3", "-march=native", "-ffp-contract=off"],
            )
        ]
        ext_modules = cythonize(
            extensions,
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
