"""ADMM-based joint channel estimation, detection and decoding (JCDD) for
MIMO channels with a Gaussian prior.

The receiver alternates one majorized bit sweep with the polytope slack and
dual updates. The channel enters through a per-iteration posterior-mean
estimate V computed either from the full covariance (general path) or as a
ridge regression (fast path, exact for an i.i.d. prior). Relaxation and
acceleration knobs (o_r, o_p) recover plain ADMM at (1, 0); per-layer
parameter tables drive the unfolded-network variant.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve

from .gf2code import build_parity_polytope, stack_parity_checks, syndrome_ok
from .modem import map_word
from .output import ReceiverOutput

_SQRT2 = np.sqrt(2.0)
_C16 = 4.0 / np.sqrt(10.0)

# Grid-searched defaults (tuner.default_params exposes the committed grid).
# The large alpha pushes bits off the 0.5 plateau early; mu*Lambda keeps the
# bit-update denominator comfortably positive for the (3,6) code (Lambda=96).
DEFAULT_MU = 1.0
DEFAULT_ALPHA = 12.0

_POWER_ITERS = 30
_POWER_TOL = 1e-8


@dataclass(frozen=True)
class GaussianPrior:
    """Prior on the vectorized channel (Fortran vec ordering).

    Exactly one of `var` (i.i.d. CN(0, var) entries) or `cov` (full
    covariance) is given. fast=True forces the ridge path for a full
    covariance, using the worst-case ridge sigma2 / lam_min(cov).
    """

    var: float | None = None
    cov: np.ndarray | None = None
    fast: bool = False

    def __post_init__(self):
        if (self.var is None) == (self.cov is None):
            raise ValueError("give exactly one of var or cov")
        if self.var is not None:
            if not (self.var > 0):
                raise ValueError(f"var must be positive, got {self.var}")
        else:
            c = np.asarray(self.cov, dtype=complex)
            if c.ndim != 2 or c.shape[0] != c.shape[1]:
                raise ValueError(f"cov must be square, got shape {c.shape}")
            scale = max(np.abs(c).max(), 1.0)
            if not np.allclose(c, c.conj().T, atol=1e-10 * scale):
                raise ValueError("cov must be Hermitian")
            object.__setattr__(self, "cov", c)
            self.lam_min  # fail fast on a non-PD covariance

    @cached_property
    def lam_min(self):
        """Smallest covariance eigenvalue (the i.i.d. variance itself)."""
        if self.var is not None:
            return float(self.var)
        w = np.linalg.eigvalsh(self.cov)
        if w[0] <= 1e-14 * max(w[-1], 1.0):
            raise ValueError("cov is not positive definite")
        return float(w[0])

    @cached_property
    def _cov_inv(self):
        fac = cho_factor(self.cov)
        return cho_solve(fac, np.eye(self.cov.shape[0], dtype=complex))

    def inv_matrix(self, dim):
        """C_g^{-1} as a dense matrix of the given dimension."""
        if self.var is not None:
            return np.eye(dim) / self.var
        if self.cov.shape[0] != dim:
            raise ValueError(f"prior dimension {self.cov.shape[0]} != {dim}")
        return self._cov_inv

    def ridge(self, sigma2):
        """Fast-path ridge: exact for i.i.d., else the sigma2/lam_min bound."""
        return sigma2 / self.lam_min

    @property
    def prefers_fast(self):
        return self.var is not None or self.fast


def _as_prior(c_g):
    if isinstance(c_g, GaussianPrior):
        return c_g
    arr = np.asarray(c_g)
    if arr.ndim == 0:
        return GaussianPrior(var=float(arr))
    return GaussianPrior(cov=arr)


@dataclass(frozen=True, eq=False)
class LayerParamsG:
    """Per-layer solver parameters; constant tables model plain ADMM."""

    mu: np.ndarray
    alpha: np.ndarray
    o_r: np.ndarray
    o_p: np.ndarray
    o_lam: np.ndarray
    o_ups: np.ndarray
    network: bool = False

    def __post_init__(self):
        names = ("mu", "alpha", "o_r", "o_p", "o_lam", "o_ups")
        for name in names:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.mu.size
        if n < 1:
            raise ValueError("need at least one layer")
        for name in names:
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if np.any(self.mu <= 0):
            raise ValueError("mu must be positive")
        if np.any(self.alpha < 0):
            raise ValueError("alpha must be nonnegative")
        if np.any(self.o_lam <= 0) or np.any(self.o_ups <= 0):
            raise ValueError("o_lam and o_ups must be positive")

    @property
    def layers(self):
        return self.mu.size

    @classmethod
    def constant(cls, mu=DEFAULT_MU, alpha=DEFAULT_ALPHA, *, o_r=1.0, o_p=0.0,
                 o_lam=1.0, o_ups=1.0, layers=1, network=False):
        full = lambda v: np.full(layers, float(v))
        return cls(full(mu), full(alpha), full(o_r), full(o_p),
                   full(o_lam), full(o_ups), network=network)

    def at(self, i):
        """Parameters of layer i; the last layer repeats past the table end."""
        i = min(i, self.layers - 1)
        return (self.mu[i], self.alpha[i], self.o_r[i], self.o_p[i],
                self.o_lam[i], self.o_ups[i])


@dataclass(frozen=True)
class SurrogateCacheG:
    """Fixed-point data of one majorization step.

    v: effective channel estimate (receive antennas x streams);
    d: linear coefficient (streams x data slots);
    lam: curvature bound, lam*I >= v^H v when set by the eigenvalue rule;
    upsilon: fast-path ridge actually used, None on the general path.
    """

    v: np.ndarray
    d: np.ndarray
    lam: float
    upsilon: float | None


@dataclass
class AdmmStateG:
    """Iterate of the Gaussian-prior solver: relaxed bits, polytope slack z,
    scaled dual eta, plus the pre-ReLU history the accelerated form needs."""

    b: np.ndarray
    z: np.ndarray
    eta: np.ndarray
    n: int = 0
    w_prev: np.ndarray = field(default=None, repr=False)
    relu_w_prev: np.ndarray = field(default=None, repr=False)


def power_iter_lmax(m, *, iters=_POWER_ITERS, tol=_POWER_TOL, cushion=1e-9):
    """Upper bound on the largest eigenvalue of a Hermitian PSD matrix.

    Power iteration (default 30 rounds, residual tolerance 1e-8), with a
    Weyl cushion so lam*I - m stays PSD to roundoff: rho + ||Mv - rho v||
    dominates lam_max once the iterate carries the top eigenspace, and the
    trace bound caps the degenerate rest (and the no-convergence fallback).
    """
    m = np.asarray(m)
    tr = float(np.real(np.trace(m)))
    if tr <= 0.0:
        return 0.0
    n = m.shape[0]
    v = np.ones(n) + 1j * np.linspace(0.0, 0.5, n)
    v = v / np.linalg.norm(v)
    for _ in range(iters):
        w = m @ v
        rho = float(np.real(np.conj(v) @ w))
        res = float(np.linalg.norm(w - rho * v))
        if res <= tol * max(rho, 1e-30):
            return min(tr, rho + res + cushion * rho + 1e-12)
        nw = np.linalg.norm(w)
        if nw <= tr * 1e-300:
            return tr
        v = w / nw
    return tr


def estimate_g_closed_form(y, s, c_g, sigma2):
    """MAP channel estimate given transmit matrix s: the solution of
    (conj(S)S^T (x) I + sigma2 C_g^{-1}) vec(G) = vec(Y S^H), returned as the
    (receive x transmit) matrix. Cholesky solve; the normal matrix is
    Hermitian PD for sigma2 > 0 and a PD prior.
    """
    y = np.asarray(y)
    s = np.asarray(s)
    if y.ndim != 2 or s.ndim != 2 or y.shape[1] != s.shape[1]:
        raise ValueError(f"incompatible shapes y{y.shape}, s{s.shape}")
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    n_r = y.shape[0]
    n_a = s.shape[0]
    prior = _as_prior(c_g)
    gram = np.kron(s.conj() @ s.T, np.eye(n_r)) + sigma2 * prior.inv_matrix(n_r * n_a)
    rhs = (y @ s.conj().T).reshape(-1, order="F")
    g = cho_solve(cho_factor(gram), rhs)
    return g.reshape(n_r, n_a, order="F")


def surrogate_cache(y, s_p, f_prev, c_g, sigma2, *, precoder=None, lam=None,
                    ridge_scale=1.0, use_fast=None):
    """Build (V, D, lam, upsilon) for one majorized bit sweep.

    f_prev is the previous relaxed symbol matrix in the stream domain; the
    antenna-domain transmit matrix is [s_p, precoder @ f_prev]. General path:
    V is the full-covariance estimate; fast path: V = Y S^H (S S^H + ups I)^-1
    with ups = ridge_scale * sigma2 / lam_min(C_g). lam defaults to the
    power-iteration bound on V^H V (after precoding); pass lam to pin it.
    """
    prior = _as_prior(c_g)
    fast = prior.prefers_fast if use_fast is None else use_fast
    s_d = f_prev if precoder is None else precoder @ f_prev
    s_prev = np.hstack([s_p, s_d])
    if fast:
        ups = ridge_scale * prior.ridge(sigma2)
        gram = s_prev @ s_prev.conj().T + ups * np.eye(s_prev.shape[0])
        v_ant = cho_solve(cho_factor(gram), s_prev @ y.conj().T).conj().T
    else:
        ups = None
        v_ant = estimate_g_closed_form(y, s_prev, prior, sigma2)
    v_eff = v_ant if precoder is None else v_ant @ precoder
    m = v_eff.conj().T @ v_eff
    lam_val = power_iter_lmax(m) if lam is None else float(lam)
    y_d = y[:, s_p.shape[1]:]
    d = (lam_val * np.eye(m.shape[0]) - m) @ f_prev + v_eff.conj().T @ y_d
    return SurrogateCacheG(v=v_eff, d=d, lam=lam_val, upsilon=ups)


def bit_coefficients(spec, lam, d_sym, b_sym):
    """Per-bit quadratic/linear surrogate coefficients, flattened over bits.

    For every bit, beta*b + gamma is the partial derivative of
    lam*|f(b)|^2 - 2 Re{conj(f(b)) d} with the symbol's other bits held at
    b_sym. 16QAM couples bit pairs (1,3) and (2,4): positions 1,2 read the
    amplitude bits from b_sym as given, positions 3,4 read the already
    swept sign bits, so callers refresh after updating the first pair.
    """
    d = np.asarray(d_sym)
    b = np.asarray(b_sym, dtype=float)
    if b.shape != (d.size, spec.q):
        raise ValueError(f"b_sym shape {b.shape} != ({d.size}, {spec.q})")
    if spec.q == 2:
        beta = np.full((d.size, 2), 4.0 * lam)
        gamma = np.stack([2.0 * _SQRT2 * d.real - 2.0 * lam,
                          2.0 * _SQRT2 * d.imag - 2.0 * lam], axis=1)
    else:
        u3 = 1.0 + 2.0 * b[:, 2]
        u4 = 1.0 + 2.0 * b[:, 3]
        w1 = 1.0 - 2.0 * b[:, 0]
        w2 = 1.0 - 2.0 * b[:, 1]
        beta = 0.8 * lam * np.stack([u3, u4, w1, w2], axis=1) ** 2
        gamma = np.stack([_C16 * d.real * u3 - 0.4 * lam * u3 ** 2,
                          _C16 * d.imag * u4 - 0.4 * lam * u4 ** 2,
                          -_C16 * d.real * w1 + 0.4 * lam * w1 ** 2,
                          -_C16 * d.imag * w2 + 0.4 * lam * w2 ** 2], axis=1)
    return beta.ravel(), gamma.ravel()


def _default_packing(n_sym, n_streams):
    i = np.arange(n_sym)
    return i % n_streams, i // n_streams


def _bit_sweep(b, slack_gap, polytope, lam, d_sym, mu, alpha, spec,
               names=("mu", "alpha")):
    """Clipped coordinate sweep over every symbol's bits, in place.

    slack_gap is theta - z - eta. The polytope Gram matrix is diagonal for
    disjoint check rows, so the per-bit solves are exact and may run
    vectorized; within a 16QAM symbol the sign pair is swept before the
    amplitude pair. names labels (penalty, concave push) in errors; the
    sparse solver calls this with (rho, kappa).
    """
    if not mu > 0:
        raise ValueError(f"{names[0]} must be positive, got {mu}")
    n_sym = b.size // spec.q
    atze = polytope.a.T @ slack_gap
    lam_a = polytope.lam.astype(float)
    b2 = b.reshape(n_sym, spec.q)
    groups = ((0, 1), (2, 3)) if spec.q == 4 else ((0, 1),)
    for grp in groups:
        beta, gamma = bit_coefficients(spec, lam, d_sym, b2)
        bg = beta.reshape(n_sym, spec.q)
        gg = gamma.reshape(n_sym, spec.q)
        for qi in grp:
            idx = np.arange(n_sym) * spec.q + qi
            den = mu * lam_a[idx] + bg[:, qi] - 2.0 * alpha
            if np.any(den <= 0):
                raise ValueError(
                    f"non-positive bit-update denominator: {names[1]}={alpha} "
                    f"too large for {names[0]}={mu} "
                    f"(min denominator {den.min():.6g})")
            b2[:, qi] = np.clip((mu * atze[idx] - gg[:, qi] - alpha) / den, 0.0, 1.0)
    return b


def update_bits(state, cache, polytope, mu, alpha, spec, *, sym_rows=None,
                sym_cols=None):
    """One majorized bit sweep, in place. sym_rows/sym_cols map symbol index
    -> entry of cache.d (default: single user, streams fastest)."""
    n_sym = state.b.size // spec.q
    if sym_rows is None:
        sym_rows, sym_cols = _default_packing(n_sym, cache.d.shape[0])
    d_sym = cache.d[sym_rows, sym_cols]
    return _bit_sweep(state.b, polytope.theta - state.z - state.eta, polytope,
                      cache.lam, d_sym, mu, alpha, spec)


def _slack_dual_step(ab, theta, z_prev, eta_prev, w_prev, relu_w_prev, o_r, o_p):
    w = theta - o_r * ab - (1.0 - o_r) * (theta - z_prev) - eta_prev
    relu_w = np.maximum(w, 0.0)
    z = relu_w + o_p * (relu_w - relu_w_prev)
    eta = z - (1.0 + o_p) * w + o_p * w_prev
    return z, eta, w, relu_w


def update_z_eta(state, polytope, o_r=1.0, o_p=0.0, *, ab=None):
    """Slack and dual update in the relaxed/accelerated form, in place.

    (o_r, o_p) = (1, 0) is plain ADMM: z = relu(theta - A b - eta),
    eta += A b + z - theta. Positive o_p extrapolates past the ReLU, so z
    can leave the nonnegative orthant by design; it stays >= 0 at o_p = 0.
    """
    theta = polytope.theta.astype(float)
    if ab is None:
        ab = polytope.a @ state.b
    z, eta, w, relu_w = _slack_dual_step(ab, theta, state.z, state.eta,
                                         state.w_prev, state.relu_w_prev,
                                         o_r, o_p)
    state.z = z
    state.eta = eta
    state.w_prev = w
    state.relu_w_prev = relu_w
    return z, eta


def _init_state(polytope, b_init):
    b = np.full(polytope.n, 0.5) if b_init is None else np.asarray(b_init, dtype=float).copy()
    if b.shape != (polytope.n,) or np.any(b < 0) or np.any(b > 1):
        raise ValueError("b_init must lie in [0,1]^N")
    w0 = polytope.theta.astype(float) - polytope.a @ b
    return AdmmStateG(b=b, z=np.maximum(w0, 0.0), eta=np.zeros(polytope.n_rows),
                      n=0, w_prev=w0, relu_w_prev=np.maximum(w0, 0.0))


def _packing(n_sym, users, n_s):
    """Symbol index -> (stream row, data slot) for stacked user codewords."""
    n_sym_u = n_sym // users
    n_s_u = n_s // users
    i = np.arange(n_sym)
    u, i_u = divmod(i, n_sym_u)
    return u * n_s_u + i_u % n_s_u, i_u // n_s_u


def solve(y, s_p, code, polytope, prior, sigma2, spec, *, params=None,
          max_iter=100, b_init=None, record_trajectory=False, precoder=None,
          users=1):
    """Run the Gaussian-prior JCDD receiver on one frame.

    Per iteration: rebuild the surrogate at the current relaxed bits, sweep
    the bits, update (z, eta), then stop early once the hard decision
    satisfies every parity check. Ties at 0.5 decide to bit 1. The returned
    channel estimate is the closed form at [s_p, precoder @ f(b_hat)].
    """
    y = np.asarray(y, dtype=complex)
    s_p = np.asarray(s_p, dtype=complex)
    prior = _as_prior(prior)
    if params is None:
        params = LayerParamsG.constant()
    if code.n != polytope.n:
        raise ValueError(f"code n={code.n} != polytope n={polytope.n}")
    if code.n % (spec.q * users):
        raise ValueError(f"{code.n} bits do not split over {users} users of Q={spec.q}")
    n_r, t_tot = y.shape
    n_ant, t_p = s_p.shape
    t_d = t_tot - t_p
    n_s = n_ant if precoder is None else precoder.shape[1]
    n_sym = code.n // spec.q
    if n_sym % users or n_s % users:
        raise ValueError("symbols and streams must split evenly over users")
    if n_sym != (n_s // users) * t_d * users:
        raise ValueError(
            f"{n_sym} symbols do not fill {n_s} streams over {t_d} data slots")
    rows, cols = _packing(n_sym, users, n_s)

    fast = prior.prefers_fast or params.network
    state = _init_state(polytope, b_init)
    a_f = polytope.a.astype(float)
    f_shape = (n_s, t_d)
    lam0 = None
    traj = [] if record_trajectory else None
    converged = False
    hard = state.b >= 0.5
    cache = None

    for n in range(1, max_iter + 1):
        mu, alpha, o_r, o_p, o_lam, o_ups = params.at(n - 1)
        f_prev = np.zeros(f_shape, dtype=complex)
        f_prev[rows, cols] = map_word(state.b, spec)
        cache = surrogate_cache(
            y, s_p, f_prev, prior, sigma2, precoder=precoder,
            ridge_scale=o_ups if params.network else 1.0,
            use_fast=fast, lam=None)
        if params.network:
            if lam0 is None:
                lam0 = cache.lam
            lam_l = o_lam * lam0
            cache = SurrogateCacheG(cache.v, cache.d + (lam_l - cache.lam) * f_prev,
                                    lam_l, cache.upsilon)
        try:
            update_bits(state, cache, polytope, mu, alpha, spec,
                        sym_rows=rows, sym_cols=cols)
        except ValueError as err:
            raise ValueError(f"layer {n}: {err}") from None
        update_z_eta(state, polytope, o_r, o_p, ab=a_f @ state.b)
        state.n = n
        if record_trajectory:
            traj.append(state.b.copy())
        hard = state.b >= 0.5
        if syndrome_ok(code, hard):
            converged = True
            break

    f_hard = np.zeros(f_shape, dtype=complex)
    f_hard[rows, cols] = map_word(hard.astype(float), spec)
    s_d_hard = f_hard if precoder is None else precoder @ f_hard
    g_hat = estimate_g_closed_form(y, np.hstack([s_p, s_d_hard]), prior, sigma2)
    diag = {"fast_path": fast, "lam_final": None if cache is None else cache.lam}
    return ReceiverOutput(bits=hard.astype(np.uint8), g_hat=g_hat,
                          converged=converged, iterations=state.n,
                          diagnostics=diag, trajectory=traj)


def solve_multiuser(y, s_p, codes, prior, sigma2, spec, *, precoder=None, **kw):
    """Uplink JCDD over stacked users: block-diagonal parity structure,
    column-stacked channels, the same per-user precoder on every user.
    `prior` describes one user's channel; i.i.d. priors carry over and full
    covariances are block-diagonalized."""
    users = len(codes)
    stacked = stack_parity_checks(codes)
    polytope = build_parity_polytope(stacked)
    w_full = None if precoder is None else block_diag(*([precoder] * users))
    prior = _as_prior(prior)
    if prior.cov is not None:
        prior = GaussianPrior(cov=block_diag(*([prior.cov] * users)), fast=prior.fast)
    return solve(y, s_p, stacked, polytope, prior, sigma2, spec,
                 precoder=w_full, users=users, **kw)
