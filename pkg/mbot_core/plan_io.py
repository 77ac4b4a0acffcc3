# mbot_core/plan_io.py - Plan export as CSV triplets and as a dense binary matrix
import logging
import struct

import numpy as np
import pandas as pd

from mbot_core.minibatch import SparsePlan

logger = logging.getLogger(__name__)

PLAN_MAGIC = b"MBOTPLAN"
HEADER = struct.Struct("<8sII")
FLAG_SUBSAMPLED = 0x1


def write_plan_csv(plan: SparsePlan, path):
    """Write (i, j, mass) triplets with an ``i,j,mass`` header"""
    rows, cols, masses = plan.triplets()
    frame = pd.DataFrame({"i": rows, "j": cols, "mass": masses})
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(frame)} plan entries to {path}")


def read_plan_csv(path, n_source: int, n_target: int = None, subsampled: bool = True) -> SparsePlan:
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = {"i", "j", "mass"} - set(frame.columns)
    if missing:
        raise ValueError(f"Plan file {path} is missing columns {sorted(missing)}")
    n_target = n_source if n_target is None else n_target
    rows = frame["i"].to_numpy(dtype=np.int64)
    cols = frame["j"].to_numpy(dtype=np.int64)
    if len(rows) and (rows.max() >= n_source or cols.max() >= n_target or min(rows.min(), cols.min()) < 0):
        raise ValueError(f"Plan file {path} has indices outside a {n_source}x{n_target} grid")
    return SparsePlan.from_triplets(n_source, n_target, rows, cols,
                                    frame["mass"].to_numpy(dtype=np.float64), subsampled)


def write_plan_binary(matrix: np.ndarray, path, subsampled: bool = False):
    """Dense square plan: 16-byte header then n*n little-endian float64, row-major"""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    if matrix.shape != (n, n):
        raise ValueError(f"Binary plan layout needs a square matrix, got {matrix.shape}")
    flags = FLAG_SUBSAMPLED if subsampled else 0
    with open(path, "wb") as f:
        f.write(HEADER.pack(PLAN_MAGIC, n, flags))
        f.write(np.ascontiguousarray(matrix).astype("<f8").tobytes())
    logger.info(f"Wrote {n}x{n} binary plan to {path}")


def read_plan_binary(path):
    """Returns (matrix, subsampled flag)"""
    with open(path, "rb") as f:
        header = f.read(HEADER.size)
        if len(header) != HEADER.size:
            raise ValueError(f"Plan file {path} is truncated (no header)")
        magic, n, flags = HEADER.unpack(header)
        if magic != PLAN_MAGIC:
            raise ValueError(f"Plan file {path} has bad magic {magic!r}")
        payload = f.read()
    if len(payload) != 8 * n * n:
        raise ValueError(f"Plan file {path} holds {len(payload)} bytes, expected {8 * n * n}")
    matrix = np.frombuffer(payload, dtype="<f8").reshape(n, n).astype(np.float64)
    return matrix, bool(flags & FLAG_SUBSAMPLED)
