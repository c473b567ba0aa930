"""Kernel selection: compiled extension when importable, numpy fallback otherwise.

Set ``SRPSSM_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("SRPSSM_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
run_block = _compiled.run_block if _compiled is not None else _kernels_py.run_block
run_block_py = _kernels_py.run_block
run_block_compiled = _compiled.run_block if _compiled is not None else None

RULE_SR = _kernels_py.RULE_SR
RULE_CUSUM = _kernels_py.RULE_CUSUM
RULE_LR = _kernels_py.RULE_LR
