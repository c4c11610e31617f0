import os
import sys

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the numpy rasterizer is used instead
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("GRAPHIXS_NO_EXTENSION", "0") in ("", "0"):
    openmp = [] if sys.platform == "darwin" else ["-fopenmp"]
    ext_modules = cythonize(
        [Extension(
            "graphixs.renderer._raster",
            ["src/graphixs/renderer/_raster.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"] + openmp,
            extra_link_args=openmp,
        )],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
