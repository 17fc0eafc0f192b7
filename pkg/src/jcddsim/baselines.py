"""Reference receivers for comparison runs: pilot channel estimation (LMMSE
or beamspace ISTA), soft-interference-cancellation MMSE and exact MAP
detection, and the decoupled / IDD / ICDD turbo orchestrations.

LLR convention follows modem: positive favors bit 0. All exchanged soft
information is extrinsic: the demapper subtracts each bit's own prior and
the decoder feedback subtracts the detector input, so no module sees its
own output as its own prior within a round. Channel re-estimation in ICDD
uses the decoder posterior as virtual pilots, per-symbol error variance
folded into an effective per-column noise level.

Receivers operate on antenna-domain streams (one code bit block fills
N_ant streams over T_D slots); precoded or multiuser frames are outside
their contract.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .gf2code import bp_decode_soft
from .jcdd_gaussian import _as_prior, estimate_g_closed_form
from .jcdd_sparse import DEFAULT_EPS, default_tau, pgd_channel_step
from .modem import LLR_MAX, demap_llr_block, map_word, soft_symbol_stats_block
from .output import ReceiverOutput

_MAP_BIT_BUDGET = 16
# noiseless sanity frames still need a well-posed detector metric
_SIGMA2_FLOOR = 1e-12


@dataclass(frozen=True)
class TurboConfig:
    """Iteration caps shared by the turbo baselines."""

    max_turbo: int = 10
    max_bp: int = 100
    max_ista: int = 100

    def __post_init__(self):
        if min(self.max_turbo, self.max_bp, self.max_ista) < 1:
            raise ValueError("all iteration caps must be >= 1")


@dataclass(frozen=True)
class ReceiverFlavor:
    """Channel-estimation method and detector of one baseline receiver.

    ce: "lmmse" (needs the Gaussian channel prior: scalar variance, full
    covariance, or a GaussianPrior), "ista" (needs the beamspace transforms
    f_r/f_t and the L1 weight eps), or "genie" (reads the true channel off
    the frame; calibration upper bound). detector: "mmse" or "map".
    """

    ce: str = "lmmse"
    detector: str = "mmse"
    prior: object = None
    f_r: np.ndarray | None = None
    f_t: np.ndarray | None = None
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.ce not in ("lmmse", "ista", "genie"):
            raise ValueError(f"unknown estimation method '{self.ce}'")
        if self.detector not in ("mmse", "map"):
            raise ValueError(f"unknown detector '{self.detector}'")
        if self.ce == "lmmse" and self.prior is None:
            raise ValueError("lmmse estimation needs a channel prior")
        if self.ce == "ista" and (self.f_r is None or self.f_t is None):
            raise ValueError("ista estimation needs beamspace transforms f_r, f_t")


# ---------------------------------------------------------------------------
# channel estimation


def _lmmse_core(y, s, prior, sigma2):
    # i.i.d. prior: the matrix form Y S^H (S S^H + (sigma2/var) I)^-1 is the
    # exact posterior mean and avoids the Kronecker normal equations
    if prior.var is not None:
        gram = s @ s.conj().T + (sigma2 / prior.var) * np.eye(s.shape[0])
        return cho_solve(cho_factor(gram), s @ y.conj().T).conj().T
    return estimate_g_closed_form(y, s, prior, sigma2)


def lmmse_channel_estimate(y_p, s_p, c_g, sigma2):
    """Pilot-block LMMSE/MAP channel estimate (receive x transmit).

    Posterior mean of G given Y_P = G S_P + noise under the Gaussian prior
    c_g (scalar variance, vec covariance, or GaussianPrior).
    """
    return _lmmse_core(np.asarray(y_p, dtype=complex),
                       np.asarray(s_p, dtype=complex), _as_prior(c_g), sigma2)


def ista_channel_estimate(y, s, f_r, f_t, sigma2, eps, iters):
    """Beamspace Lasso channel estimate via ISTA.

    Minimizes ||F_r^H Y - G_s F_t^H S||_F^2 + sigma2*eps*|G_s|_1 from a zero
    start with the safe stepsize 1/lam_max((F_t^H S)(F_t^H S)^H); S is fixed
    here (pilots, or virtual pilots), so the anchor needs no derating.
    Returns the antenna-domain estimate F_r G_s F_t^H.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    y = np.asarray(y, dtype=complex)
    s = np.asarray(s, dtype=complex)
    f_r = np.asarray(f_r, dtype=complex)
    f_t = np.asarray(f_t, dtype=complex)
    tau = default_tau(s, f_t)
    g_s = np.zeros((f_r.shape[0], f_t.shape[0]), dtype=complex)
    for _ in range(iters):
        g_s = pgd_channel_step(g_s, y, s, f_r, f_t, sigma2, eps, tau)
    return f_r @ g_s @ f_t.conj().T


def _whiten_columns(y, s_p, x_mean, x_var, sigma2, stream_gain):
    """Stack [S_P, X_mean], scale every column to unit noise variance."""
    s_full = np.hstack([s_p, x_mean])
    col_var = np.concatenate([
        np.full(s_p.shape[1], sigma2),
        sigma2 + np.asarray(stream_gain, dtype=float) @ np.asarray(x_var, dtype=float),
    ])
    scale = 1.0 / np.sqrt(np.maximum(col_var, _SIGMA2_FLOOR))
    return y * scale, s_full * scale


def soft_lmmse_estimate(y, s_p, x_mean, x_var, c_g, sigma2, stream_gain):
    """Virtual-pilot LMMSE re-estimate from soft data symbols.

    Data columns enter as pilots at their posterior means; each column's
    symbol-error variance is folded into an effective noise
    sigma2 + sum_k stream_gain[k] * x_var[k, t], with stream_gain the mean
    channel power per receive antenna of stream k. Columns are whitened to
    unit noise and the pilot estimator runs at sigma2 = 1.
    """
    yw, sw = _whiten_columns(np.asarray(y, dtype=complex),
                             np.asarray(s_p, dtype=complex),
                             np.asarray(x_mean, dtype=complex), x_var,
                             sigma2, stream_gain)
    return _lmmse_core(yw, sw, _as_prior(c_g), 1.0)


def soft_ista_estimate(y, s_p, x_mean, x_var, f_r, f_t, sigma2, eps, iters,
                       stream_gain):
    """Virtual-pilot ISTA re-estimate; noise folding as in soft_lmmse_estimate."""
    yw, sw = _whiten_columns(np.asarray(y, dtype=complex),
                             np.asarray(s_p, dtype=complex),
                             np.asarray(x_mean, dtype=complex), x_var,
                             sigma2, stream_gain)
    return ista_channel_estimate(yw, sw, f_r, f_t, 1.0, eps, iters)


def _stream_gain(prior, n_r, n_ant):
    """Mean channel power per receive antenna of each transmit stream."""
    if prior.var is not None:
        return np.full(n_ant, prior.var)
    d = np.real(np.diag(prior.cov))
    return d.reshape(n_ant, n_r).mean(axis=1)


# ---------------------------------------------------------------------------
# detection


def mmse_equalize(y_d, g_hat, prior_mean, prior_var, sigma2):
    """Soft-interference-cancellation MMSE over a data block.

    Per slot: subtract every stream's prior mean except the detected one,
    filter with the MMSE weights built from the prior variances (full unit
    energy on the detected stream), and return the unbiased symbol
    estimates x_hat with their conditional noise variances nu, both
    (N_s, T_D). One Hermitian solve covers all streams of a slot; the
    detected stream's filter follows by a rank-one correction, giving
    nu_k = 1 / (g_k^H Sigma0^{-1} g_k) - v_k > 0.
    """
    y = np.asarray(y_d, dtype=complex)
    g = np.asarray(g_hat, dtype=complex)
    if y.ndim != 2 or g.ndim != 2 or g.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible shapes y{y.shape}, g{g.shape}")
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    n_r, t_d = y.shape
    n_s = g.shape[1]
    mean = np.broadcast_to(np.asarray(prior_mean, dtype=complex), (n_s, t_d))
    var = np.broadcast_to(np.asarray(prior_var, dtype=float), (n_s, t_d))
    x_hat = np.empty((n_s, t_d), dtype=complex)
    nu = np.empty((n_s, t_d))
    eye = sigma2 * np.eye(n_r)
    for t in range(t_d):
        sig0 = eye + (g * var[:, t]) @ g.conj().T
        qg = cho_solve(cho_factor(sig0), g)
        q = np.maximum(np.real(np.sum(g.conj() * qg, axis=0)),
                       np.finfo(float).tiny)
        resid = y[:, t] - g @ mean[:, t]
        x_hat[:, t] = (qg.conj().T @ resid + q * mean[:, t]) / q
        nu[:, t] = np.maximum(1.0 / q - var[:, t], np.finfo(float).tiny)
    return x_hat, nu


def mmse_detect_soft(y_d, g_hat, priors, sigma2, spec):
    """Per-bit extrinsic LLRs from the soft-IC MMSE equalizer.

    priors: (N_s, T_D, Q) LLR array or None for the prior-free first pass.
    Each equalized symbol is demapped as a Gaussian observation with the
    filter bias removed and conditional variance nu; the demapper subtracts
    the bit's own prior, keeping the output extrinsic.
    """
    y = np.asarray(y_d, dtype=complex)
    n_s = np.asarray(g_hat).shape[1]
    t_d = y.shape[1]
    pri = (np.zeros((n_s, t_d, spec.q)) if priors is None
           else np.asarray(priors, dtype=float))
    if pri.shape != (n_s, t_d, spec.q):
        raise ValueError(f"prior shape {pri.shape} != ({n_s}, {t_d}, {spec.q})")
    mean, var = soft_symbol_stats_block(pri.reshape(-1, spec.q), spec)
    x_hat, nu = mmse_equalize(y, g_hat, mean.reshape(n_s, t_d),
                              var.reshape(n_s, t_d), sigma2)
    llr = demap_llr_block(x_hat.ravel(), nu.ravel(), pri.reshape(-1, spec.q), spec)
    return llr.reshape(n_s, t_d, spec.q)


def map_detect(y_d, g_hat, priors, sigma2, spec):
    """Exact symbol-vector MAP extrinsic LLRs by full enumeration.

    Marginalizes the joint posterior over all 2^(N_s Q) transmit vectors of
    each slot under independent bit priors. N_s*Q is capped at 16.
    """
    y = np.asarray(y_d, dtype=complex)
    g = np.asarray(g_hat, dtype=complex)
    n_r, t_d = y.shape
    n_s = g.shape[1]
    n_bits = n_s * spec.q
    if n_bits > _MAP_BIT_BUDGET:
        raise ValueError(
            f"MAP enumeration over {n_bits} bits exceeds the "
            f"{_MAP_BIT_BUDGET}-bit budget")
    pri = (np.zeros((n_s, t_d, spec.q)) if priors is None
           else np.asarray(priors, dtype=float))
    if pri.shape != (n_s, t_d, spec.q):
        raise ValueError(f"prior shape {pri.shape} != ({n_s}, {t_d}, {spec.q})")

    count = 1 << n_bits
    shift = n_bits - 1 - np.arange(n_bits)
    bits = ((np.arange(count)[:, None] >> shift) & 1).astype(float)
    x = map_word(bits.reshape(-1), spec).reshape(count, n_s)
    r = g @ x.T
    dist = (np.sum(np.abs(y) ** 2, axis=0)[:, None]
            - 2.0 * np.real(y.conj().T @ r)
            + np.sum(np.abs(r) ** 2, axis=0)[None, :])

    pri_t = np.clip(pri.transpose(1, 0, 2).reshape(t_d, n_bits),
                    -LLR_MAX, LLR_MAX)
    lp0 = -np.logaddexp(0.0, -pri_t)
    lp1 = -np.logaddexp(0.0, pri_t)
    metric = lp1 @ bits.T + lp0 @ (1.0 - bits.T) - dist / sigma2

    out = np.empty((t_d, n_bits))
    for p in range(n_bits):
        zero = bits[:, p] == 0
        out[:, p] = (logsumexp(metric[:, zero], axis=1)
                     - logsumexp(metric[:, ~zero], axis=1))
    extrinsic = np.clip(out - pri_t, -LLR_MAX, LLR_MAX)
    return extrinsic.reshape(t_d, n_s, spec.q).transpose(1, 0, 2)


# ---------------------------------------------------------------------------
# turbo orchestrations


def _llrs_to_word(llrs):
    # symbol i sits at (stream i mod N_s, slot i div N_s): slot-major flatten
    return np.ascontiguousarray(llrs.transpose(1, 0, 2)).reshape(-1)


def _word_to_stream_llrs(word, n_s, t_d, q):
    return word.reshape(t_d, n_s, q).transpose(1, 0, 2)


def _initial_estimate(frame, flavor, config, sigma2):
    if flavor.ce == "genie":
        return frame.g.copy()
    if flavor.ce == "lmmse":
        return lmmse_channel_estimate(frame.y_p, frame.s_p, flavor.prior, sigma2)
    return ista_channel_estimate(frame.y_p, frame.s_p, flavor.f_r, flavor.f_t,
                                 sigma2, flavor.eps, config.max_ista)


def _reestimate(frame, flavor, config, sigma2, post_word, spec, g_prev):
    n_ant = frame.s_p.shape[0]
    n_r = frame.y.shape[0]
    t_d = frame.y.shape[1] - frame.t_p
    mean, var = soft_symbol_stats_block(post_word.reshape(-1, spec.q), spec)
    x_mean = mean.reshape(t_d, n_ant).T
    x_var = var.reshape(t_d, n_ant).T
    if flavor.ce == "lmmse":
        gain = _stream_gain(_as_prior(flavor.prior), n_r, n_ant)
        return soft_lmmse_estimate(frame.y, frame.s_p, x_mean, x_var,
                                   flavor.prior, sigma2, gain)
    # no prior to read the stream powers from: use the current estimate
    gain = np.sum(np.abs(g_prev) ** 2, axis=0) / n_r
    return soft_ista_estimate(frame.y, frame.s_p, x_mean, x_var, flavor.f_r,
                              flavor.f_t, sigma2, flavor.eps, config.max_ista,
                              gain)


def _detect(y_d, g_hat, prior_word, sigma2, spec, flavor, n_s, t_d):
    pri = (None if prior_word is None
           else _word_to_stream_llrs(prior_word, n_s, t_d, spec.q))
    detector = mmse_detect_soft if flavor.detector == "mmse" else map_detect
    return _llrs_to_word(detector(y_d, g_hat, pri, sigma2, spec))


def _turbo(frame, code, flavor, spec, config, max_rounds, re_estimate):
    n_ant, t_p = frame.s_p.shape
    t_d = frame.y.shape[1] - t_p
    if code.n != n_ant * t_d * spec.q:
        raise ValueError(
            f"code length {code.n} does not fill {n_ant} streams over "
            f"{t_d} slots at Q={spec.q}")
    sigma2 = max(frame.sigma2, _SIGMA2_FLOOR)
    g_hat = _initial_estimate(frame, flavor, config, sigma2)
    prior_word = None
    post_word = None
    bp_iters = []
    converged = False
    hard = np.zeros(code.n, dtype=np.uint8)
    rounds = 0
    for r in range(1, max_rounds + 1):
        rounds = r
        if re_estimate and r > 1 and flavor.ce != "genie":
            g_hat = _reestimate(frame, flavor, config, sigma2, post_word,
                                spec, g_hat)
        det_word = _detect(frame.y_d, g_hat, prior_word, sigma2, spec,
                           flavor, n_ant, t_d)
        post_word, hard, converged, it = bp_decode_soft(code, det_word,
                                                        config.max_bp)
        bp_iters.append(it)
        if converged:
            break
        prior_word = post_word - det_word
    diag = {"bp_iterations": bp_iters, "ce": flavor.ce,
            "detector": flavor.detector}
    return ReceiverOutput(bits=hard.astype(np.uint8), g_hat=g_hat,
                          converged=converged, iterations=rounds,
                          diagnostics=diag)


def run_decoupled(frame, code, flavor, spec, config=None):
    """Channel estimate, prior-free detection, one BP decoding pass."""
    config = TurboConfig() if config is None else config
    return _turbo(frame, code, flavor, spec, config, 1, False)


def run_idd(frame, code, flavor, spec, config=None):
    """Turbo detection-decoding: the channel is estimated once, then the
    detector and decoder exchange extrinsic LLRs until the syndrome holds
    or max_turbo rounds pass."""
    config = TurboConfig() if config is None else config
    return _turbo(frame, code, flavor, spec, config, config.max_turbo, False)


def run_icdd(frame, code, flavor, spec, config=None):
    """IDD plus per-round channel re-estimation from the decoder posterior
    (soft data symbols as virtual pilots)."""
    config = TurboConfig() if config is None else config
    return _turbo(frame, code, flavor, spec, config, config.max_turbo, True)
