import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; dlr falls back to numpy
    cythonize = None

compile_args = ["-O3", "-ffast-math", "-fopenmp"]
if not os.environ.get("DLR_PORTABLE"):
    compile_args.append("-march=native")

ext_modules = []
if cythonize is not None and not os.environ.get("DLR_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "dlr._kernel",
                ["src/dlr/_kernel.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=compile_args,
                extra_link_args=["-fopenmp", "-lmvec", "-lm"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
