import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("SGD_INFLUENCE_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "sgd_influence._kernels",
                    ["src/sgd_influence/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
