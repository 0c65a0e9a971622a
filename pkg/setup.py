"""Build script for the optional Cython kernel extension.

The package works without the extension (a pure-numpy fallback is selected
at import time), so a failed compile is downgraded to a warning.
"""

import sys

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/lightnl/kernels/_fastconv.pyx"],
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": "3",
        },
    )
    include_dirs = [numpy.get_include()]
except Exception as exc:  # pragma: no cover
    print(f"warning: skipping Cython extension build ({exc})", file=sys.stderr)
    ext_modules = []
    include_dirs = []

setup(ext_modules=ext_modules, include_dirs=include_dirs)
