import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("CASPL_NO_EXT", "") in ("", "0"):
    try:
        from Cython.Build import cythonize
    except ImportError:  # fall back to the numpy kernels at runtime
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [Extension("caspl.autodiff._ckernels",
                       ["src/caspl/autodiff/_ckernels.pyx"],
                       include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
