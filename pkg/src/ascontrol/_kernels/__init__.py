"""Kernel selection: compiled core if built, numpy fallback otherwise.

Set ASC_FORCE_PYTHON=1 (before import) to force the fallback.
"""

import os

from . import _py

backend = "python"
path_logsumexp = _py.path_logsumexp

if not os.environ.get("ASC_FORCE_PYTHON"):
    try:
        from . import _core

        path_logsumexp = _core.path_logsumexp
        backend = "compiled"
    except ImportError:
        pass


def backend_name():
    return backend
