"""Build script: compiles the optional accelerated kernel if Cython and a C
compiler are available, otherwise installs the pure-Python package unchanged."""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "ascontrol._kernels._core",
                ["src/ascontrol/_kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # no Cython / no compiler: fall back silently
    print(f"ascontrol: building without compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
