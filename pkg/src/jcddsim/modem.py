"""Gray QPSK/16QAM mapping, exact soft demapping and soft symbol moments.

LLR convention everywhere: positive LLR favors bit value 0 (bit 0 maps to
the positive amplitude).  LLR magnitudes are capped at LLR_MAX.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

LLR_MAX = 40.0

_SQRT2 = np.sqrt(2.0)
_SQRT10 = np.sqrt(10.0)


@dataclass(frozen=True)
class ConstellationSpec:
    name: str
    q: int
    points: np.ndarray  # 2^q complex points, index = bit label as integer
    labels: np.ndarray  # (2^q, q) bits, labels[v] = binary digits of v

    def __post_init__(self):
        if abs(np.mean(np.abs(self.points) ** 2) - 1.0) > 1e-12:
            raise ValueError(f"{self.name}: average symbol energy != 1")


def _evaluate_map(bits):
    """Gray mapping formula on a (..., Q) bit array; accepts relaxed bits."""
    b = np.asarray(bits, dtype=float)
    q = b.shape[-1]
    if q == 2:
        return ((1 - 2 * b[..., 0]) + 1j * (1 - 2 * b[..., 1])) / _SQRT2
    if q == 4:
        re = (1 - 2 * b[..., 0]) * (1 + 2 * b[..., 2])
        im = (1 - 2 * b[..., 1]) * (1 + 2 * b[..., 3])
        return (re + 1j * im) / _SQRT10
    raise ValueError(f"unsupported bits per symbol: {q}")


@lru_cache(maxsize=None)
def constellation(name):
    """ConstellationSpec for 'qpsk' or '16qam'."""
    key = name.lower()
    if key == "qpsk":
        q = 2
    elif key == "16qam":
        q = 4
    else:
        raise ValueError(f"unknown constellation '{name}'")
    labels = np.array(
        [[(v >> (q - 1 - i)) & 1 for i in range(q)] for v in range(2**q)]
    )
    points = _evaluate_map(labels)
    return ConstellationSpec(key, q, points, labels)


def map_bits(bits, spec):
    """Single symbol from Q (possibly fractional) bits."""
    b = np.asarray(bits, dtype=float)
    if b.shape != (spec.q,):
        raise ValueError(f"expected {spec.q} bits, got shape {b.shape}")
    return complex(_evaluate_map(b))


def map_word(bits, spec):
    """Symbol vector from a relaxed bit word of length multiple of Q."""
    b = np.asarray(bits, dtype=float)
    if b.ndim != 1 or b.size % spec.q:
        raise ValueError(f"bit word length {b.size} not a multiple of Q={spec.q}")
    return _evaluate_map(b.reshape(-1, spec.q))


def word_to_streams(bits, spec, n_streams):
    """Stream-time symbol matrix; symbol i goes to entry (i mod n_streams,
    i div n_streams), i.e. streams advance fastest."""
    x = map_word(bits, spec)
    if x.size % n_streams:
        raise ValueError(f"{x.size} symbols do not fill {n_streams} streams")
    return x.reshape(n_streams, -1, order="F")


def _prior_log_probs(prior_llrs):
    """log P(bit=0), log P(bit=1) from LLRs clipped to +-LLR_MAX."""
    llr = np.clip(np.asarray(prior_llrs, dtype=float), -LLR_MAX, LLR_MAX)
    return -np.logaddexp(0.0, -llr), -np.logaddexp(0.0, llr)


def demap_llr_block(symbols, noise_var, prior_llrs, spec):
    """Extrinsic LLRs for a batch of equalized symbols.

    symbols: (T,), noise_var: scalar or (T,), prior_llrs: (T, Q).
    Exact log-sum posterior over the 2^Q points under independent bit
    priors; the returned extrinsic is posterior minus prior, capped.
    """
    y = np.atleast_1d(np.asarray(symbols, dtype=complex))
    t = y.shape[0]
    nv = np.broadcast_to(np.asarray(noise_var, dtype=float), (t,))
    if np.any(nv <= 0):
        raise ValueError("noise variance must be positive")
    priors = np.zeros((t, spec.q)) if prior_llrs is None else np.asarray(prior_llrs, float)
    if priors.shape != (t, spec.q):
        raise ValueError(f"prior shape {priors.shape} != ({t}, {spec.q})")

    lp0, lp1 = _prior_log_probs(priors)
    labels = spec.labels.astype(float)
    prior_term = lp1 @ labels.T + lp0 @ (1.0 - labels.T)  # (T, P)
    metric = prior_term - np.abs(y[:, None] - spec.points[None, :]) ** 2 / nv[:, None]

    out = np.empty((t, spec.q))
    for qi in range(spec.q):
        zero = spec.labels[:, qi] == 0
        m0 = _logsumexp(metric[:, zero])
        m1 = _logsumexp(metric[:, ~zero])
        out[:, qi] = m0 - m1
    extrinsic = out - np.clip(priors, -LLR_MAX, LLR_MAX)
    return np.clip(extrinsic, -LLR_MAX, LLR_MAX)


def _logsumexp(a):
    peak = a.max(axis=1, keepdims=True)
    return (peak + np.log(np.exp(a - peak).sum(axis=1, keepdims=True)))[:, 0]


def demap_llr(symbol, noise_var, prior_llrs, spec):
    """Extrinsic LLRs (length Q) for one equalized symbol."""
    priors = None if prior_llrs is None else np.asarray(prior_llrs, float)[None, :]
    return demap_llr_block(np.array([symbol]), noise_var, priors, spec)[0]


def soft_symbol_stats_block(prior_llrs, spec):
    """Per-symbol prior mean and variance from (T, Q) bit LLRs."""
    priors = np.atleast_2d(np.asarray(prior_llrs, dtype=float))
    if priors.shape[1] != spec.q:
        raise ValueError(f"expected {spec.q} LLRs per symbol")
    if not np.isfinite(priors).all():
        raise ValueError("prior LLRs must be finite")
    lp0, lp1 = _prior_log_probs(priors)
    labels = spec.labels.astype(float)
    logp = lp1 @ labels.T + lp0 @ (1.0 - labels.T)  # (T, P)
    p = np.exp(logp)
    mean = p @ spec.points
    second = p @ (np.abs(spec.points) ** 2)
    var = np.maximum(second - np.abs(mean) ** 2, 0.0)
    return mean, var


def soft_symbol_stats(prior_llrs, spec):
    """Prior mean and variance of one symbol from its Q bit LLRs."""
    mean, var = soft_symbol_stats_block(np.asarray(prior_llrs, float)[None, :], spec)
    return complex(mean[0]), float(var[0])
