"""Formatting helpers: digests, numeric array display and report tables."""

import hashlib
import math
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def format_number(value: float) -> str:
    """Integers print without a fractional part, everything else with 6 significant digits."""
    value = float(value)
    if math.isfinite(value) and value == int(value):
        return str(int(value))
    return f"{value:.6g}"


def format_array(values: Sequence[float], cap: int = 64) -> str:
    """Render a numeric array as ``[a, b, ...]``, eliding everything past ``cap`` elements."""
    values = np.asarray(values).tolist()
    shown = ", ".join(format_number(v) for v in values[:cap])
    if len(values) > cap:
        shown += f", ... (+{len(values) - cap} more)"
    return f"[{shown}]"


def format_distance(distance: float) -> str:
    return f"{distance:.4f}"


def format_metric(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def render_table(frame: pd.DataFrame, float_digits: int = 4) -> str:
    """Plain-text table used by every CLI report."""
    if frame.empty:
        return "(empty)"
    return frame.to_string(index=False, float_format=lambda v: f"{v:.{float_digits}f}")


def confusion_frame(labels: Sequence[str], matrix: Iterable[Iterable[int]]) -> pd.DataFrame:
    """Confusion matrix with true labels as rows and predictions as columns."""
    frame = pd.DataFrame(list(matrix), index=list(labels), columns=list(labels))
    frame.index.name = "true\\pred"
    return frame


def metrics_frame(rows: Mapping[str, Mapping[str, Optional[float]]]) -> pd.DataFrame:
    """One row per run (seed or sweep value), one column per metric."""
    frame = pd.DataFrame.from_dict(rows, orient="index")
    frame.index.name = "run"
    return frame.reset_index()
