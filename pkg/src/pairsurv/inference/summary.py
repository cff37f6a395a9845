"""Posterior summaries: HPDIs and convergence statistics across chains."""
from __future__ import annotations

import logging
import math
from typing import Dict, List, Sequence

import numpy as np

from ..errors import InvalidInputError

log = logging.getLogger(__name__)

RHAT_WARN = 1.05


def hpdi(draws, mass: float = 0.95):
    """Shortest interval containing ``mass`` of the sorted draws."""
    x = np.sort(np.asarray(draws, dtype=float))
    n = x.size
    if n == 0:
        raise InvalidInputError("need at least one draw")
    k = max(1, int(math.ceil(mass * n)))
    if k >= n:
        return float(x[0]), float(x[-1])
    widths = x[k - 1:] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


def _split(chains: Sequence[np.ndarray]) -> np.ndarray:
    n = min(len(c) for c in chains)
    half = n // 2
    if half < 2:
        raise InvalidInputError("need at least 4 draws per chain for convergence statistics")
    parts = []
    for c in chains:
        c = np.asarray(c, dtype=float)[:n]
        parts += [c[:half], c[half: 2 * half]]
    return np.array(parts)


def split_rhat(chains: Sequence[np.ndarray]) -> float:
    """Potential scale reduction with each chain split in half."""
    x = _split(chains)
    m, n = x.shape
    w = x.var(axis=1, ddof=1).mean()
    b = n * x.mean(axis=1).var(ddof=1)
    if w == 0.0:
        return 1.0 if b == 0.0 else math.inf
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def ess(chains: Sequence[np.ndarray]) -> float:
    """Multi-chain effective sample size (Geyer initial monotone sequence)."""
    x = _split(chains)
    m, n = x.shape
    centered = x - x.mean(axis=1, keepdims=True)
    var_chain = x.var(axis=1, ddof=1)
    w = var_chain.mean()
    if w == 0.0:
        return float(m * n)
    var_plus = (n - 1) / n * w + n * x.mean(axis=1).var(ddof=1) / n
    # autocovariance per chain via FFT
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n] / n
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau = -1.0
    prev = math.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0.0:
            break
        pair = min(pair, prev)
        prev = pair
        tau += 2.0 * pair
    return float(m * n / max(tau, 1e-12))


def summarize(chains, mass: float = 0.95) -> Dict[str, dict]:
    """Mean, median, HPDI, R-hat and ESS for each output column of the chains."""
    names = chains[0].names
    out = {}
    for name in names:
        per_chain = [c.column(name) for c in chains]
        pooled = np.concatenate(per_chain)
        lo, hi = hpdi(pooled, mass)
        entry = {"mean": float(pooled.mean()), "median": float(np.median(pooled)),
                 "hpdi_lower": lo, "hpdi_upper": hi}
        if len(chains) >= 2 and min(len(c) for c in per_chain) >= 4:
            entry["rhat"] = split_rhat(per_chain)
            entry["ess"] = ess(per_chain)
        out[name] = entry
    return out


def derived_columns(chains) -> Dict[str, List[np.ndarray]]:
    """Per-chain derived quantities reported alongside the raw parameters."""
    out = {}
    for c in chains:
        if "gamma" in c.names:
            out.setdefault("infectious_days", []).append(1.0 / c.column("gamma"))
        if "eta" in c.names:
            out.setdefault("broad_recovery_days", []).append(1.0 / c.column("eta"))
    return out


def convergence_warnings(summary: Dict[str, dict], threshold: float = RHAT_WARN) -> List[str]:
    msgs = []
    for name, entry in summary.items():
        r = entry.get("rhat")
        if r is not None and not r <= threshold:
            msgs.append(f"{name}: R-hat {r:.3f} exceeds {threshold}")
    for m in msgs:
        log.warning(m)
    return msgs
