"""Stain-adaptation toolkit: translation-augmented supervised training plus
feature-consistency learning on unlabeled multi-stain data, with a synthetic
benchmark and evaluation tooling.

Set ULSA_THREADS to cap BLAS worker threads; it must take effect before numpy
loads, which is why this runs here rather than in the CLI.
"""

import os as _os

if "ULSA_THREADS" in _os.environ:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _os.environ["ULSA_THREADS"])

__version__ = "0.1.0"
