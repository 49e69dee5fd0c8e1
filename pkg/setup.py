"""Build script for the optional compiled kernel.

The extension is optional: if Cython or a C compiler is unavailable the
package installs without it and falls back to the numpy implementation.
"""

import os
import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(f"warning: compiled kernel not built ({exc}); using numpy fallback",
              file=sys.stderr)


def extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    openmp = os.environ.get("PURC_NO_OPENMP", "") == ""
    flags = ["-O3"] + (["-fopenmp"] if openmp else [])
    ext = Extension(
        "purc_ta._ckernels",
        ["src/purc_ta/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=flags,
        extra_link_args=["-fopenmp"] if openmp else [],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
