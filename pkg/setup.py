"""Builds the optional compiled kernels; the package runs without them."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("NEURALBP_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("neuralbp._ckernels", ["src/neuralbp/_ckernels.pyx"],
                       include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
