import os
import platform

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # build without the compiled kernel; the numpy fallback is used
    ext_modules = []
else:
    compile_args = ["-O3"]
    if platform.machine().lower() in ("x86_64", "amd64") and os.name != "nt":
        compile_args.append("-mpopcnt")
    ext_modules = cythonize(
        [
            Extension(
                "instabnn.bitops._xnor",
                ["src/instabnn/bitops/_xnor.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=compile_args,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
