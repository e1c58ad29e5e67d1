"""Build script: compiles the optional convolution kernels extension.

The package works without the extension (a numpy fallback is selected at
import time), so a missing Cython toolchain only costs speed, not features.
"""

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "mcpa.tensor._convkern",
                ["src/mcpa/tensor/_convkern.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
