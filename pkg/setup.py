from setuptools import setup, Extension

import numpy
from Cython.Build import cythonize

extensions = [
    Extension(
        "relgraph.kernels._fast",
        ["src/relgraph/kernels/_fast.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
