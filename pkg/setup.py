from setuptools import Extension, setup

setup(
    ext_modules=[
        Extension(
            "posh._native",
            sources=["src/posh/_native.c"],
            extra_compile_args=["-O2"],
        )
    ]
)
