# cli/output.py - Console status lines and lossless JSON / CSV writers
import json
import math
import sys

import numpy as np
import pandas as pd
from colorama import Fore, Style
from colorama import init as colorama_init

colorama_init()

_COLORS = {
    "success": Fore.GREEN,
    "info": Fore.CYAN,
    "warning": Fore.YELLOW,
    "error": Fore.RED,
}


def status(message: str, level: str = "info", stream=None):
    """Coloured status line on stderr; stdout is reserved for data"""
    stream = stream or sys.stderr
    color = _COLORS.get(level, "")
    print(f"{color}{message}{Style.RESET_ALL}", file=stream)


def _plain(value):
    """Python builtins json can encode; non-finite floats become None"""
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def dumps(value) -> str:
    """JSON with round-trip float reprs and NaN/inf as null"""
    return json.dumps(_plain(value), allow_nan=False)


def write_json(value, path):
    with open(path, "w") as f:
        f.write(dumps(value))
        f.write("\n")


def write_table(frame: pd.DataFrame, path_stem: str, fmt: str = "csv") -> str:
    """Write a table as CSV or as a JSON list of records; returns the path"""
    if fmt == "json":
        path = f"{path_stem}.json"
        write_json(frame.to_dict(orient="records"), path)
    else:
        path = f"{path_stem}.csv"
        frame.to_csv(path, index=False, float_format="%.17g")
    return path
