import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off keeps a*b+c as two rounded float32 ops, so the compiled
# kernels match the numpy fallback bit for bit. Do not add -ffast-math.
extensions = [
    Extension(
        "kvdistill.kernels._core",
        ["src/kvdistill/kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)
