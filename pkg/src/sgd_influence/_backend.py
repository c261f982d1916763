"""Kernel backend selection.

The compiled extension is used when it imports; set
``SGD_INFLUENCE_BACKEND=python`` to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
kernels = _kernels_py

if os.environ.get("SGD_INFLUENCE_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        kernels = _compiled
        BACKEND = "compiled"


def available_backends() -> dict:
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled
    except ImportError:
        return out
    out["compiled"] = _compiled
    return out
