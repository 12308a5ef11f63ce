import os

import numpy as np
from setuptools import Extension, setup

# the compiled kernels are optional: without Cython the generated C file is
# used, and a failed compile leaves the numpy fallback in place
try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

source = "src/cpm/_kernels.pyx" if cythonize else "src/cpm/_kernels.c"
ext_modules = []
if os.path.exists(source):
    ext_modules = [
        Extension("cpm._kernels", [source], include_dirs=[np.get_include()], extra_compile_args=["-O3"], optional=True)
    ]
    if cythonize:
        ext_modules = cythonize(ext_modules, compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
