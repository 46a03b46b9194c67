"""Build script for the optional compiled LCS kernel.

The package works without the extension: rlqfs.kernels falls back to the
pure-Python implementation when the compiled module is absent.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "rlqfs._lcsext",
                ["src/rlqfs/_lcsext.pyx"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
