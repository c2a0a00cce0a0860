"""Build script for the optional compiled kernels.

The extension is optional: if Cython or a C compiler is missing the package
still installs and ``dlsm.kernels`` falls back to the pure-Python versions.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("DLSM_NO_EXTENSIONS"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "dlsm._ckernels",
                    ["src/dlsm/_ckernels.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
