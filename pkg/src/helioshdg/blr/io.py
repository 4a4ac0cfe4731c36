"""Matrix Market export of the trace matrix and JSON statistics."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

STATS_KEYS = ("n_op_pct", "n_entries_pct", "n_entries_pct_mp", "cond", "bwd", "timings")


def write_matrix_market(K, path, comment: str = "HDG trace matrix") -> Path:
    """Complex general coordinate format."""
    path = Path(path)
    scipy.io.mmwrite(str(path), sp.coo_matrix(K).astype(complex), comment=comment,
                     field="complex", symmetry="general")
    return path


def read_matrix_market(path) -> sp.csr_matrix:
    return sp.csr_matrix(scipy.io.mmread(str(path)))


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return None if np.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def write_stats_json(stats: dict, path) -> Path:
    """Write statistics; the keys of ``STATS_KEYS`` are always present."""
    missing = [k for k in STATS_KEYS if k not in stats]
    if missing:
        raise KeyError(f"statistics lack {missing}")
    path = Path(path)
    path.write_text(json.dumps(_plain(stats), indent=2, sort_keys=True))
    return path
