from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "ranknce.kernels._conv_cy",
                ["src/ranknce/kernels/_conv_cy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    # Cython/numpy missing at build time: install the pure-numpy package;
    # the kernel backend falls back at import.
    ext_modules = []

setup(ext_modules=ext_modules)
