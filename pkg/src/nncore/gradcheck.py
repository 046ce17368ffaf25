# src/nncore/gradcheck.py
"""
Central finite-difference gradient check.

h = 1e-5 * (|w| + 1). An entry whose estimate at h disagrees with the
estimate at h/10 sits on a kink (ReLU boundary, argmax switch) and is
skipped, not scored.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
import pandas as pd
import torch

from src.nncore.store import ParameterStore, backward
from src.utils.errors import GradCheckError
from src.utils.logger import logger

STEP = 1e-5
DENOM_FLOOR = 1e-5


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    checked: Dict[str, int] = field(default_factory=dict)
    skipped: Dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "worst": self.worst,
            "max_rel_error": self.max_rel_error,
            "checked": self.checked,
            "skipped": self.skipped,
        }

    def table(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"parameter": n, "max_rel_error": e, "checked": self.checked[n], "skipped": self.skipped[n]}
            for n, e in self.max_rel_error.items()
        ])


def _value(closure: Callable[[], torch.Tensor]) -> float:
    with torch.no_grad():
        v = float(closure())
    if not np.isfinite(v):
        raise GradCheckError(f"closure produced non-finite value {v}")
    return v


def _central(closure, flat: torch.Tensor, i: int, h: float) -> float:
    w = float(flat[i])
    flat[i] = w + h
    plus = _value(closure)
    flat[i] = w - h
    minus = _value(closure)
    flat[i] = w
    return (plus - minus) / (2.0 * h)


def grad_check(closure: Callable[[], torch.Tensor], store: ParameterStore,
               tolerance: float = 1e-4, max_entries: int = 16, seed: int = 0,
               names: Optional[list] = None) -> GradCheckReport:
    """
    closure() must rebuild the forward graph from the current parameter
    values and return a scalar loss. Runs in 64-bit only.
    """
    params = store.named()
    if names is not None:
        params = {n: params[n] for n in names}
    for n, p in params.items():
        if p.dtype != torch.float64:
            raise GradCheckError(f"grad check needs float64 parameters, {n} is {p.dtype}")

    store.zero_grad()
    loss = closure()
    if not torch.isfinite(loss).all():
        raise GradCheckError("loss is not finite")
    grads = backward(loss, store)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        analytic = grads[name].detach().reshape(-1)
        if not torch.isfinite(analytic).all():
            raise GradCheckError(f"non-finite analytic gradient in {name}")
        flat = p.data.view(-1)
        n = flat.numel()
        entries = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)

        worst, skipped = 0.0, 0
        for i in entries:
            i = int(i)
            h = STEP * (abs(float(flat[i])) + 1.0)
            numeric = _central(closure, flat, i, h)
            finer = _central(closure, flat, i, h / 10.0)
            scale = max(abs(numeric), abs(finer), DENOM_FLOOR)
            if abs(numeric - finer) / scale > tolerance:
                skipped += 1
                continue
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), DENOM_FLOOR)
            worst = max(worst, err)

        report.max_rel_error[name] = worst
        report.checked[name] = len(entries) - skipped
        report.skipped[name] = skipped

    level = "SUCCESS" if report.passed else "WARNING"
    logger.log(level, f"Grad check worst={report.worst:.3e} tolerance={tolerance:.1e} params={len(params)}")
    return report
