"""Effective sample size, rank-normalized split R-hat and held-out predictive log-likelihood."""

from __future__ import annotations

import logging
import math
from typing import Mapping

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm, rankdata

from .graph import Address

log = logging.getLogger(__name__)


def _as_matrix(m, min_chains: int = 1) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError("samples must be a chains x draws matrix")
    if a.shape[0] < min_chains:
        raise ValueError(f"need at least {min_chains} chains")
    if a.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    if not np.all(np.isfinite(a)):
        raise ValueError("samples must be finite")
    return a


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of one chain at every lag, by direct sums."""
    n = len(x)
    d = x - x.mean()
    return np.array([d[: n - k] @ d[k:] for k in range(n)]) / n


def ess_flagged(m) -> tuple[float, bool]:
    """Multi-chain ESS with Geyer's initial monotone sequence; flag set for constant input."""
    a = _as_matrix(m)
    chains, n = a.shape
    total = chains * n
    acov = np.array([_autocov(c) for c in a])
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    var_plus = w * (n - 1.0) / n
    if chains > 1:
        var_plus += a.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return float(total), True
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum consecutive (even, odd) lag pairs while positive, then enforce monotonicity
    pairs = []
    for t in range(0, n - 1, 2):
        p = rho[t] + rho[t + 1]
        if p <= 0:
            break
        pairs.append(p)
    for i in range(1, len(pairs)):
        pairs[i] = min(pairs[i], pairs[i - 1])
    tau = -1.0 + 2.0 * sum(pairs)
    tau = max(tau, 1.0 / math.log10(total)) if total > 1 else tau
    return float(total / tau), False


def ess(m) -> float:
    return ess_flagged(m)[0]


def _split(a: np.ndarray) -> np.ndarray:
    half = a.shape[1] // 2
    return np.concatenate([a[:, :half], a[:, a.shape[1] - half:]], axis=0)


def _classic_rhat(a: np.ndarray) -> float:
    n = a.shape[1]
    w = a.var(axis=1, ddof=1).mean()
    b = n * a.mean(axis=1).var(ddof=1)
    return float(math.sqrt(((n - 1.0) / n * w + b / n) / w))


def rank_normalize(a: np.ndarray) -> np.ndarray:
    """Inverse-normal transform of pooled fractional ranks (ties get average ranks)."""
    r = rankdata(a, method="average").reshape(a.shape)
    return norm.ppf((r - 0.375) / (a.size + 0.25))


def r_hat_flagged(m) -> tuple[float, bool]:
    a = _as_matrix(m, min_chains=2)
    if np.ptp(a) == 0.0:
        return 1.0, True
    s = _split(a)
    z = rank_normalize(s)
    if np.any(z.var(axis=1, ddof=1) == 0.0):
        # a stuck chain has no within variance; treat as maximally unmixed
        return math.inf, True
    return _classic_rhat(z), False


def r_hat(m) -> float:
    return r_hat_flagged(m)[0]


def pll(log_liks) -> float:
    """Held-out predictive log-likelihood from a (samples x held-out points) log-likelihood matrix."""
    ll = np.asarray(log_liks, dtype=np.float64)
    if ll.ndim == 1:
        ll = ll[:, None]
    if ll.shape[0] < 1:
        raise ValueError("need at least one posterior sample")
    if ll.shape[1] < 1:
        raise ValueError("empty held-out set")
    return float(np.sum(logsumexp(ll, axis=0) - math.log(ll.shape[0])))


def heldout_log_liks(model, draws: list[dict], heldout: Mapping[Address, object]) -> np.ndarray:
    """Log-likelihood of each held-out point under each posterior draw.

    ``draws`` maps addresses to latent values; held-out nodes must depend
    only on addresses present in each draw.
    """
    if not heldout:
        raise ValueError("empty held-out set")
    targets = sorted(heldout)
    out = np.empty((len(draws), len(targets)))
    for s, values in enumerate(draws):
        def read(family, *args, _v=values):
            return _v[Address(family, tuple(args))]

        for j, a in enumerate(targets):
            out[s, j] = model.distribution(a, read).log_prob(heldout[a])
    return out


def model_pll(model, draws: list[dict], heldout: Mapping[Address, object]) -> float:
    return pll(heldout_log_liks(model, draws, heldout))


def summarize(matrices: Mapping[Address, np.ndarray], pll_value: float | None = None) -> dict:
    """Per-address ESS and R-hat plus min/max/median aggregates, in the metrics JSON layout."""
    ess_d, rhat_d, flags = {}, {}, []
    for a in sorted(matrices):
        m = np.asarray(matrices[a], dtype=np.float64)
        if np.isnan(m).any():
            # address absent in part of the run (open-universe); not summarized
            flags.append(f"{a}: partially instantiated")
            continue
        e, fe = ess_flagged(m)
        ess_d[str(a)] = e
        if fe:
            flags.append(f"{a}: constant samples")
        if m.shape[0] >= 2:
            r, fr = r_hat_flagged(m)
            rhat_d[str(a)] = r
            if fr and not fe:
                flags.append(f"{a}: stuck chain")
    ess_vals = list(ess_d.values())
    rhat_vals = list(rhat_d.values())
    out = {
        "ess": ess_d,
        "rhat": rhat_d,
        "min_ess": min(ess_vals) if ess_vals else None,
        "median_ess": float(np.median(ess_vals)) if ess_vals else None,
        "max_rhat": max(rhat_vals) if rhat_vals else None,
        "median_rhat": float(np.median(rhat_vals)) if rhat_vals else None,
        "flags": flags,
    }
    if pll_value is not None:
        out["pll"] = pll_value
    return out
