"""Expectile kernels with a compiled core and a numpy fallback.

The compiled extension is used when it was built; set ``REACHPLAN_PURE=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _fallback

if os.environ.get("REACHPLAN_PURE"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _expectile as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

expectile_weights = _impl.expectile_weights
grouped_expectile = _impl.grouped_expectile
expectile_loss_grad = _impl.expectile_loss_grad

__all__ = ["BACKEND", "expectile_weights", "grouped_expectile", "expectile_loss_grad"]
