"""Channel models, pilots, and the forward transmission model.

SNR convention: SNR = 1/sigma^2 with unit-energy transmitted symbols and
unit-variance channel entries (IID/Kronecker) or the Saleh-Valenzuela
normalization.  Harness outputs always record sigma^2 next to SNR so the
convention is visible in results.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import dft

from .modem import word_to_streams

# default per-user stream precoder (4 antennas, 2 streams)
PRECODER_2STREAM = 0.5 * np.array(
    [[1, 0], [0, 1], [1, 0], [0, 1j]], dtype=complex
)


class SparsePriorSignal(ValueError):
    """Raised when a dense Gaussian prior is requested for a sparse model."""


def crandn(rng, shape, var=1.0):
    """CN(0, var) array built from two independent real normals."""
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@dataclass(frozen=True)
class FrameConfig:
    n_t: int
    n_r: int
    t_p: int
    q: int
    users: int = 1
    precoder: np.ndarray | None = None

    def __post_init__(self):
        if min(self.n_t, self.n_r, self.users) < 1 or self.t_p < 1:
            raise ValueError("antenna/user/pilot counts must be >= 1")
        if self.q not in (2, 4):
            raise ValueError(f"bits per symbol must be 2 or 4, got {self.q}")
        if self.precoder is not None:
            w = np.asarray(self.precoder, dtype=complex)
            if w.ndim != 2 or w.shape[0] != self.n_t:
                raise ValueError(f"precoder must be {self.n_t}xN_s, got {w.shape}")
            object.__setattr__(self, "precoder", w)

    @property
    def n_streams(self):
        return self.n_t if self.precoder is None else self.precoder.shape[1]

    def data_slots(self, code_n):
        """T_D for one user's code length; must divide evenly."""
        denom = self.n_streams * self.q
        if code_n % denom:
            raise ValueError(
                f"code length {code_n} not divisible by streams*Q = {denom}"
            )
        return code_n // denom


# ---------------------------------------------------------------------------
# channel models


@dataclass(frozen=True)
class IidChannel:
    n_r: int
    n_t: int
    var_g: float = 1.0

    def __post_init__(self):
        if self.var_g <= 0:
            raise ValueError("var_g must be positive")


def _check_correlation(r, name):
    r = np.asarray(r, dtype=complex)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError(f"{name} must be square")
    if np.abs(r - r.conj().T).max() > 1e-10:
        raise ValueError(f"{name} must be Hermitian")
    if np.linalg.eigvalsh(r).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return r


@dataclass(frozen=True)
class KroneckerChannel:
    r_t: np.ndarray
    r_r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r_t", _check_correlation(self.r_t, "R_t"))
        object.__setattr__(self, "r_r", _check_correlation(self.r_r, "R_r"))

    @property
    def n_t(self):
        return self.r_t.shape[0]

    @property
    def n_r(self):
        return self.r_r.shape[0]


@dataclass(frozen=True)
class SalehValenzuelaChannel:
    n_cl: int
    n_p: int
    tx_grid: tuple
    rx_grid: tuple
    spread_deg: float = 7.5
    los_var: float = 1.0
    nlos_var: float = 10 ** (-0.5)
    mean_angle_range: tuple = (-np.pi / 2, np.pi / 2)

    def __post_init__(self):
        if self.n_cl * self.n_p < 1:
            raise ValueError("need at least one path")
        for g in (self.tx_grid, self.rx_grid):
            if len(g) != 2 or min(g) < 1:
                raise ValueError(f"bad UPA grid {g}")

    @property
    def n_t(self):
        return self.tx_grid[0] * self.tx_grid[1]

    @property
    def n_r(self):
        return self.rx_grid[0] * self.rx_grid[1]


def exp_correlation(n, rho):
    """Exponential correlation matrix rho^|i-j|."""
    idx = np.arange(n)
    return (rho ** np.abs(idx[:, None] - idx[None, :])).astype(complex)


def hermitian_sqrt(r):
    """Hermitian PSD square root via eigendecomposition."""
    w, u = np.linalg.eigh(r)
    if w.min() < -1e-12:
        raise ValueError("matrix not positive semidefinite")
    return (u * np.sqrt(np.maximum(w, 0.0))) @ u.conj().T


def array_response(phi, theta, n_y, n_z):
    """Half-wavelength UPA response, y-major flattening, unit L2 norm.

    Entry (y, z) has phase pi*(y*sin(phi)*sin(theta) + z*cos(theta)) with
    y, z counted from 0.
    """
    y = np.arange(n_y)
    z = np.arange(n_z)
    ay = np.exp(1j * np.pi * y * np.sin(phi) * np.sin(theta))
    az = np.exp(1j * np.pi * z * np.cos(theta))
    return np.kron(ay, az) / np.sqrt(n_y * n_z)


def draw_channel(model, rng):
    """One channel realization G (N_r x N_t) from the given model."""
    if isinstance(model, IidChannel):
        return crandn(rng, (model.n_r, model.n_t), model.var_g)
    if isinstance(model, KroneckerChannel):
        h = crandn(rng, (model.n_r, model.n_t))
        return hermitian_sqrt(model.r_r) @ h @ hermitian_sqrt(model.r_t)
    if isinstance(model, SalehValenzuelaChannel):
        return _draw_sv(model, rng)
    raise TypeError(f"unknown channel model {type(model).__name__}")


def _draw_sv(model, rng):
    lo, hi = model.mean_angle_range
    spread = np.deg2rad(model.spread_deg)
    ny_t, nz_t = model.tx_grid
    ny_r, nz_r = model.rx_grid
    g = np.zeros((model.n_r, model.n_t), dtype=complex)
    for _ in range(model.n_cl):
        # mean azimuth/elevation of departure and arrival per cluster
        means = rng.uniform(lo, hi, size=4)
        for p in range(model.n_p):
            var = model.los_var if p == 0 else model.nlos_var
            alpha = complex(crandn(rng, (), var))
            off = rng.uniform(-spread, spread, size=4)
            a_r = array_response(means[0] + off[0], means[1] + off[1], ny_r, nz_r)
            a_t = array_response(means[2] + off[2], means[3] + off[3], ny_t, nz_t)
            g += alpha * np.outer(a_r, a_t.conj())
    scale = np.sqrt(model.n_t * model.n_r / (model.n_cl * model.n_p))
    return scale * g


def channel_covariance(model):
    """Covariance of vec(G) for dense Gaussian priors.

    Saleh-Valenzuela models do not admit this dense prior; callers should
    switch to the sparse (beamspace) receiver path.
    """
    if isinstance(model, IidChannel):
        return model.var_g * np.eye(model.n_r * model.n_t, dtype=complex)
    if isinstance(model, KroneckerChannel):
        return np.kron(model.r_t.T, model.r_r)
    if isinstance(model, SalehValenzuelaChannel):
        raise SparsePriorSignal(
            "sparse-prior: Saleh-Valenzuela channels use the beamspace receiver"
        )
    raise TypeError(f"unknown channel model {type(model).__name__}")


def beamspace_dft(n_y, n_z):
    """Unitary 2-D DFT F_{N^y} kron F_{N^z} for UPA beamspace transforms."""
    fy = dft(n_y) / np.sqrt(n_y)
    fz = dft(n_z) / np.sqrt(n_z)
    return np.kron(fy, fz)


def generate_pilots(n_t, t_p, rng=None):
    """Unit-modulus pilot block; orthogonal rows when T_P >= N_t.

    Columns of a scaled DFT matrix: deterministic, full rank, per-symbol
    energy exactly 1.  rng accepted for interface compatibility.
    """
    if t_p < 1:
        raise ValueError("T_P must be >= 1")
    if t_p >= n_t:
        return dft(t_p)[:n_t, :].copy()
    return dft(n_t)[:, :t_p].copy()


def transmit(g, s_p, s_d, sigma2, rng):
    """Y = G [S_P, S_D] + noise with CN(0, sigma2) entries."""
    if sigma2 < 0:
        raise ValueError("noise variance must be nonnegative")
    s = np.concatenate([s_p, s_d], axis=1)
    y = g @ s
    if sigma2 > 0:
        y = y + crandn(rng, y.shape, sigma2)
    return y


# ---------------------------------------------------------------------------
# frame assembly


@dataclass
class Frame:
    g: np.ndarray
    s_p: np.ndarray
    s_d: np.ndarray
    bits: np.ndarray
    y: np.ndarray
    sigma2: float
    info_bits: list = field(default_factory=list)

    @property
    def t_p(self):
        return self.s_p.shape[1]

    @property
    def y_p(self):
        return self.y[:, : self.t_p]

    @property
    def y_d(self):
        return self.y[:, self.t_p :]


def assemble_streams(bits, config, spec, code_n):
    """Antenna-domain data matrix (users*N_t x T_D) from stacked bits."""
    t_d = config.data_slots(code_n)
    blocks = []
    for k in range(config.users):
        word = bits[k * code_n : (k + 1) * code_n]
        streams = word_to_streams(word, spec, config.n_streams)
        if config.precoder is not None:
            streams = config.precoder @ streams
        blocks.append(streams)
    s_d = np.concatenate(blocks, axis=0)
    assert s_d.shape == (config.users * config.n_t, t_d)
    return s_d


def make_frame(config, model, encoders, sigma2, spec, rng):
    """Draw one transmission: info bits, codewords, channel, noise.

    encoders: one per user (a single encoder may be shared); the stacked
    channel is one independent draw per user, concatenated column-wise.
    """
    if len(encoders) != config.users:
        raise ValueError(f"need {config.users} encoders, got {len(encoders)}")
    if model.n_t != config.n_t or model.n_r != config.n_r:
        raise ValueError("channel model dimensions disagree with frame config")
    info = []
    words = []
    for enc in encoders:
        u = rng.integers(0, 2, size=enc.k)
        info.append(u)
        words.append(enc.encode(u))
    bits = np.concatenate(words)
    code_n = encoders[0].h.n
    s_d = assemble_streams(bits, config, spec, code_n)
    s_p = generate_pilots(config.users * config.n_t, config.t_p)
    g = np.concatenate([draw_channel(model, rng) for _ in range(config.users)], axis=1)
    y = transmit(g, s_p, s_d, sigma2, rng)
    return Frame(g=g, s_p=s_p, s_d=s_d, bits=bits, y=y, sigma2=sigma2, info_bits=info)
