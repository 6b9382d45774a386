"""Select the compiled core or the pure-Python fallback at import time.

Set ``INFINET_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

NAME = "python"
backend = _fallback

if os.environ.get("INFINET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as backend  # noqa: F811
    except ImportError:
        backend = _fallback
    else:
        NAME = "cython"
