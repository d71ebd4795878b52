import os

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # build the pure-Python package only
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "superbranch._kernel",
                ["src/superbranch/_kernel.pyx"],
                include_dirs=[np.get_include()],
                # contraction into FMA would break bitwise agreement with the Python backend
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
        quiet=True,
    )

if os.environ.get("SUPERBRANCH_NO_EXT"):
    ext_modules = []

setup(ext_modules=ext_modules)
