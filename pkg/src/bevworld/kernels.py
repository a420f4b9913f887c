"""Kernel backend selection.

Prefers the compiled extension (`bevworld._core`) and falls back to the
numpy implementation when the extension is missing. Set BEVWORLD_KERNELS=python
to force the fallback (used by the parity tests and the benchmark).
"""

from __future__ import annotations

import os

_forced = os.environ.get("BEVWORLD_KERNELS", "").lower()

if _forced in ("py", "python", "numpy"):
    from . import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from . import _kernels_py as _impl

        BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weights = _impl.conv2d_grad_weights


def available_backends() -> dict:
    """Map backend name -> module, for benchmarking both paths."""
    from . import _kernels_py

    table = {"python": _kernels_py}
    try:
        from . import _core  # type: ignore[attr-defined]

        table["compiled"] = _core
    except ImportError:
        pass
    return table
