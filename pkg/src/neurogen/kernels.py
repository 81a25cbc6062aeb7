"""Hot kernels with a compiled implementation and a pure numpy fallback.

The compiled extension is used when it was built and ``NEUROGEN_PURE_PYTHON``
is unset; ``BACKEND`` reports which one is active.
"""
from __future__ import annotations

import os

from neurogen import _spectra_py

if os.environ.get("NEUROGEN_PURE_PYTHON"):
    _compiled = None
else:
    try:
        from neurogen import _spectra as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
rank_one_spectra = (_compiled or _spectra_py).rank_one_spectra
python_rank_one_spectra = _spectra_py.rank_one_spectra
compiled_rank_one_spectra = _compiled.rank_one_spectra if _compiled is not None else None
