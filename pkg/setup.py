"""Build script: compiles the optional Cython kernel core.

The package works without the extension (a numpy fallback is selected at
import time), so any build failure here degrades to the pure-Python path
instead of breaking the install.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "bevworld._core",
                sources=["src/bevworld/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-march=native", "-funroll-loops"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"bevworld: skipping compiled kernels ({exc}); numpy fallback will be used")

setup(ext_modules=ext_modules)
