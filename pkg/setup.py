"""Build hook for the optional compiled ED kernel."""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the pure-numpy kernel is used instead
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("tbghf._edcore", ["src/tbghf/_edcore.pyx"], language="c++", optional=True)],
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
    )

setup(ext_modules=ext_modules)
