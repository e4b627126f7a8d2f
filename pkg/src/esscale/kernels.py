"""Backend selection for the hot kernels.

The compiled extension is used when it imports; set ``ESSCALE_PURE_PYTHON=1``
to force the numpy fallback.  ``BACKEND`` records the choice.
"""
import os

from esscale import _pykernels

python = _pykernels

compiled = None
if not os.environ.get("ESSCALE_PURE_PYTHON"):
    try:
        from esscale import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else _pykernels
BACKEND = "cython" if compiled is not None else "python"

splitmix64_at = _impl.splitmix64_at
normal_table = _impl.normal_table
weighted_noise_sum = _impl.weighted_noise_sum
pole_step = _impl.pole_step
pole_rollout = _impl.pole_rollout

__all__ = [
    "BACKEND",
    "compiled",
    "python",
    "splitmix64_at",
    "normal_table",
    "weighted_noise_sum",
    "pole_step",
    "pole_rollout",
]
