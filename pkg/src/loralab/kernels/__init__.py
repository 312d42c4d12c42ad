"""QR kernel backend selection.

Prefers the compiled extension and falls back to the pure numpy twin when
the extension is missing or ``LORALAB_PURE_KERNELS=1`` is set.  Both expose
the same ``qr_forward`` / ``qr_backward`` contract.
"""

import os

if os.environ.get("LORALAB_PURE_KERNELS") == "1":
    from . import pure as _impl
else:
    try:
        from . import _qrcore as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import pure as _impl

qr_forward = _impl.qr_forward
qr_backward = _impl.qr_backward


def backend() -> str:
    """Name of the active kernel backend: ``"compiled"`` or ``"pure"``."""
    return _impl.BACKEND
