"""Backend selection for the block entropy coder.

The compiled extension is preferred; set ``CDRE_PURE_PYTHON=1`` to force the
pure-Python implementation. Both produce identical bytes.
"""

import os

from . import _entropy_py

BACKEND = "python"
_impl = _entropy_py

if os.environ.get("CDRE_PURE_PYTHON") != "1":
    try:
        from . import _entropy_ext as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

encode_blocks = _impl.encode_blocks
decode_blocks = _impl.decode_blocks


def backends():
    """Return ``{name: module}`` for every importable backend."""
    out = {"python": _entropy_py}
    try:
        from . import _entropy_ext

        out["cython"] = _entropy_ext
    except ImportError:
        pass
    return out
