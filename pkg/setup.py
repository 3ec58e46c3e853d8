"""Builds the optional compiled kernels; the package falls back to numpy without them."""
from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # no compiler: keep the pure-Python backend
            print(f"warning: compiled kernels not built ({exc})")


ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("gradmerge._kernels", ["src/gradmerge/_kernels.pyx"],
                   include_dirs=[numpy.get_include()],
                   define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
        compiler_directives={"language_level": 3},
    )
except Exception as exc:
    print(f"warning: Cython kernels unavailable ({exc})")

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
