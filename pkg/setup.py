import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffast-math is deliberately absent: the kernels rely on exact IEEE
# behavior (integer-valued doubles, exact zero branches).
extensions = [
    Extension(
        "basin_forge._core",
        ["src/basin_forge/_core.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-fopenmp"],
        extra_link_args=["-fopenmp"],
    )
]

setup(ext_modules=cythonize(extensions, language_level="3"))
