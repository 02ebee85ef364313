from setuptools import Extension, setup
from Cython.Build import cythonize

# -ffp-contract=off: the compiled compositor must be bit-identical to the
# pure-Python fallback and the naive oracle; FMA contraction would change
# rounding of a*b+c chains.
ext = Extension(
    "flod.rasterizer._compose",
    ["src/flod/rasterizer/_compose.pyx"],
    extra_compile_args=["-O3", "-ffp-contract=off"],
)

setup(ext_modules=cythonize([ext], language_level=3))
