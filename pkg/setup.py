"""Build the optional Cython kernels.

If Cython or a C compiler is unavailable the package still installs and
falls back to the pure-Python kernels at import time.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("AFFECTSENSE_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "affectsense._core",
                    ["src/affectsense/_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
