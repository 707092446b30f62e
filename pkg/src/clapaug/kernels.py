"""Kernel backend selection.

The compiled extension is used when it imports; set ``CLAPAUG_PURE=1`` to
force the numpy fallback. ``BACKEND`` names the active one.
"""

import os

from clapaug import _kernels_py

try:
    if os.environ.get("CLAPAUG_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from clapaug import _kernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

fnv1a64 = _impl.fnv1a64
contrastive_loss_grad = _impl.contrastive_loss_grad
embedding_bag_forward = _impl.embedding_bag_forward
embedding_bag_backward = _impl.embedding_bag_backward
adam_update = _impl.adam_update
diagonal_ranks = _impl.diagonal_ranks
average_precision = _impl.average_precision


def backends():
    """Return ``{name: module}`` for every importable backend."""
    found = {"python": _kernels_py}
    try:
        from clapaug import _kernels
        found["cython"] = _kernels
    except ImportError:
        pass
    return found
