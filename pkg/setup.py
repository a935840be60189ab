"""Build hook for the optional compiled kernel extension.

The package works without the extension: deltaflow._kernels falls back to a
pure-Python implementation with identical semantics.  Building the extension
requires Cython; when it is unavailable the build silently skips it.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("deltaflow._kernels._ckernels",
                   ["src/deltaflow/_kernels/_ckernels.pyx"])],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
