"""Differentiable unfolded ADMM layers for the JCDD receiver networks.

Replicates the solver iterations of the simulator package in torch
(float64/complex128) so that per-layer parameters carry exact gradients:
jcddnet-g alternates a ridge channel surrogate with a majorized bit sweep
and a relaxed/accelerated slack-dual step; jcddnet-s replaces the surrogate
with one proximal-gradient step on the beamspace channel under a frozen
curvature bound. The forward pass on a frame matches the reference solver's
per-layer relaxed bits to roundoff (contract: 1e-6); hard decisions and
early termination stay outside the graph, so a forward always runs the
requested number of layers.

Subgradient conventions at the nonsmooth points: relu'(0) = 0 (torch's
native choice) and clip'(x) = 0 at both interval ends (enforced by a custom
autograd function; torch.clamp passes gradient at the boundary).
"""

import math

import numpy as np
import torch

from .tables import PARAM_NAMES

REAL = torch.float64
CPLX = torch.complex128

_SQRT2 = math.sqrt(2.0)
_C16 = 4.0 / math.sqrt(10.0)


class _Clip01(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.clamp(0.0, 1.0)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * ((x > 0) & (x < 1))


def clip01(x):
    """Clamp to [0, 1] with zero subgradient at both boundaries."""
    return _Clip01.apply(x)


def map_word(b, q):
    """Gray map of relaxed bits (..., n_sym, q) to symbols (..., n_sym)."""
    if q == 2:
        re = 1.0 - 2.0 * b[..., 0]
        im = 1.0 - 2.0 * b[..., 1]
        return torch.complex(re, im) / _SQRT2
    re = (1.0 - 2.0 * b[..., 0]) * (1.0 + 2.0 * b[..., 2])
    im = (1.0 - 2.0 * b[..., 1]) * (1.0 + 2.0 * b[..., 3])
    return torch.complex(re, im) / math.sqrt(10.0)


def power_iter_lmax(m, *, iters=30, tol=1e-8, cushion=1e-9):
    """Upper bound on lam_max of a Hermitian PSD matrix, differentiable.

    Same iteration as the reference solver: fixed start vector, residual
    stop at tol, Weyl cushion on the converged Ritz value, trace fallback.
    """
    tr = torch.real(torch.diagonal(m).sum())
    if tr.item() <= 0.0:
        return torch.zeros((), dtype=REAL)
    n = m.shape[0]
    v = torch.complex(torch.ones(n, dtype=REAL),
                      torch.linspace(0.0, 0.5, n, dtype=REAL))
    v = v / torch.linalg.vector_norm(v)
    for _ in range(iters):
        w = m @ v
        rho = torch.real(torch.vdot(v, w))
        res = torch.linalg.vector_norm(w - rho * v)
        if res.item() <= tol * max(rho.item(), 1e-30):
            return torch.minimum(tr, rho + res + cushion * rho + 1e-12)
        nw = torch.linalg.vector_norm(w)
        if nw.item() <= tr.item() * 1e-300:
            return tr
        v = w / nw
    return tr


def _power_iter_batch(ms, **kw):
    return torch.stack([power_iter_lmax(ms[i], **kw) for i in range(ms.shape[0])])


def shrinkage(x, t):
    """Complex soft threshold (x/|x|) max(|x| - t, 0), zero staying zero."""
    t_val = float(t.detach()) if torch.is_tensor(t) else float(t)
    if t_val < 0:
        raise ValueError(f"threshold must be nonnegative, got {t_val}")
    mag = x.abs()
    safe = torch.where(mag > 0, mag, torch.ones((), dtype=REAL))
    return x * (torch.relu(mag - t) / safe)


def _bit_coefficients(q, lam, d_sym, b_cols):
    """Per-bit surrogate coefficients as lists of (B, n_sym) columns.

    lam is (B,); d_sym (B, n_sym) complex. 16QAM reads the coupled bits
    from b_cols, so callers refresh after sweeping the sign pair.
    """
    lam_c = lam[:, None]
    if q == 2:
        beta = 4.0 * lam_c
        betas = [beta.expand_as(d_sym.real), beta.expand_as(d_sym.real)]
        gammas = [2.0 * _SQRT2 * d_sym.real - 2.0 * lam_c,
                  2.0 * _SQRT2 * d_sym.imag - 2.0 * lam_c]
        return betas, gammas
    u3 = 1.0 + 2.0 * b_cols[2]
    u4 = 1.0 + 2.0 * b_cols[3]
    w1 = 1.0 - 2.0 * b_cols[0]
    w2 = 1.0 - 2.0 * b_cols[1]
    betas = [0.8 * lam_c * u3 ** 2, 0.8 * lam_c * u4 ** 2,
             0.8 * lam_c * w1 ** 2, 0.8 * lam_c * w2 ** 2]
    gammas = [_C16 * d_sym.real * u3 - 0.4 * lam_c * u3 ** 2,
              _C16 * d_sym.imag * u4 - 0.4 * lam_c * u4 ** 2,
              -_C16 * d_sym.real * w1 + 0.4 * lam_c * w1 ** 2,
              -_C16 * d_sym.imag * w2 + 0.4 * lam_c * w2 ** 2]
    return betas, gammas


class DifferentiableLayerStack:
    """Unfolded solver layers of one network on one fixed receive setup.

    Fixed inputs: the parity polytope (A, theta, Lambda), noise variance,
    bits per symbol, channel prior variance (jcddnet-g ridge) or beamspace
    transforms (jcddnet-s). Per-layer parameters arrive as a dict of (l_max,)
    tensors, either at construction or per forward call, so training can
    pass graph nodes built from its own leaves.

    unfolded=True freezes the layer-1 curvature bound and rescales it per
    layer (o_lam / rho_chi); unfolded=False recomputes the bound from the
    fresh estimate each layer, which is the plain solver recursion.
    """

    def __init__(self, network, l_max, polytope, q, sigma2, *, var_g=1.0,
                 f_r=None, f_t=None, params=None, unfolded=True):
        if network not in PARAM_NAMES:
            raise ValueError(f"unknown network id '{network}'")
        if l_max < 1:
            raise ValueError("l_max must be >= 1")
        if q not in (2, 4):
            raise ValueError(f"unsupported bits per symbol: {q}")
        if polytope.n % q:
            raise ValueError(f"{polytope.n} bits do not split into Q={q} symbols")
        if sigma2 < 0:
            raise ValueError(f"sigma2 must be nonnegative, got {sigma2}")
        self.network = network
        self.l_max = int(l_max)
        self.q = q
        self.sigma2 = float(sigma2)
        self.var_g = float(var_g)
        self.unfolded = bool(unfolded)
        self.a = torch.as_tensor(polytope.a, dtype=REAL)
        self.theta = torch.as_tensor(polytope.theta, dtype=REAL)
        self.lam_a = torch.as_tensor(polytope.lam, dtype=REAL)
        self.n = polytope.n
        self.n_sym = polytope.n // q
        if network == "jcddnet-s":
            if f_r is None or f_t is None:
                raise ValueError("jcddnet-s needs beamspace transforms f_r, f_t")
            self.f_r = torch.as_tensor(np.asarray(f_r), dtype=CPLX)
            self.f_t = torch.as_tensor(np.asarray(f_t), dtype=CPLX)
            if self.f_r.ndim != 2 or self.f_r.shape[0] != self.f_r.shape[1] \
                    or self.f_t.ndim != 2 or self.f_t.shape[0] != self.f_t.shape[1]:
                raise ValueError("beamspace transforms must be square")
        else:
            if f_r is not None or f_t is not None:
                raise ValueError("beamspace transforms only apply to jcddnet-s")
            self.f_r = self.f_t = None
        if var_g <= 0:
            raise ValueError(f"var_g must be positive, got {var_g}")
        self.params = None if params is None else self._check_params(params)

    # -- parameter handling -------------------------------------------------

    def _check_params(self, params):
        names = PARAM_NAMES[self.network]
        if set(params) != set(names):
            raise ValueError(f"params must carry exactly {sorted(names)}")
        out = {}
        for name in names:
            t = params[name]
            t = t.to(REAL) if torch.is_tensor(t) else torch.as_tensor(
                np.asarray(t, dtype=float), dtype=REAL)
            if t.shape != (self.l_max,):
                raise ValueError(f"param '{name}' must have shape ({self.l_max},)")
            out[name] = t
        return out

    # -- frame plumbing -----------------------------------------------------

    def _prepare(self, y, s_p):
        y = y if torch.is_tensor(y) else torch.as_tensor(np.asarray(y), dtype=CPLX)
        s_p = s_p if torch.is_tensor(s_p) else torch.as_tensor(
            np.asarray(s_p), dtype=CPLX)
        squeeze = y.ndim == 2
        if squeeze:
            y = y[None]
            s_p = s_p[None] if s_p.ndim == 2 else s_p
        if y.ndim != 3 or s_p.ndim != 3 or y.shape[0] != s_p.shape[0]:
            raise ValueError(f"incompatible batch shapes y{tuple(y.shape)}, "
                             f"s_p{tuple(s_p.shape)}")
        n_t, t_p = s_p.shape[1], s_p.shape[2]
        t_d = y.shape[2] - t_p
        if t_d < 1:
            raise ValueError("frame carries no data slots")
        if self.n_sym != n_t * t_d:
            raise ValueError(
                f"{self.n} bits do not fill {n_t} streams over {t_d} data "
                f"slots at Q={self.q}")
        if self.network == "jcddnet-s":
            if self.f_r.shape[0] != y.shape[1] or self.f_t.shape[0] != n_t:
                raise ValueError(
                    f"beamspace transforms {tuple(self.f_r.shape)}, "
                    f"{tuple(self.f_t.shape)} do not match y rows "
                    f"{y.shape[1]} / s_p rows {n_t}")
        # symbol i lives at stream i mod n_t, data slot i div n_t
        i = torch.arange(self.n_sym)
        pos = (i % n_t) * t_d + (i // n_t)
        return y.to(CPLX), s_p.to(CPLX), n_t, t_p, t_d, pos, torch.argsort(pos), squeeze

    def _layer_vals(self, params, i):
        return {name: params[name][i] for name in PARAM_NAMES[self.network]}

    # -- shared update pieces -----------------------------------------------

    def _sweep(self, b, slack_gap, lam, d_sym, mu, alpha, names):
        """Clipped coordinate sweep; den <= 0 means the concave push broke
        majorization, mirrored as the solver's ValueError."""
        atze = slack_gap @ self.a
        bsz = b.shape[0]
        atze_q = atze.view(bsz, self.n_sym, self.q)
        lam_q = self.lam_a.view(self.n_sym, self.q)
        b_cols = [b.view(bsz, self.n_sym, self.q)[..., qi] for qi in range(self.q)]
        groups = ((0, 1), (2, 3)) if self.q == 4 else ((0, 1),)
        for grp in groups:
            betas, gammas = _bit_coefficients(self.q, lam, d_sym, b_cols)
            for qi in grp:
                den = mu * lam_q[:, qi] + betas[qi] - 2.0 * alpha
                if den.min().item() <= 0:
                    raise ValueError(
                        f"non-positive bit-update denominator: "
                        f"{names[1]}={alpha.detach().item():.6g} too large for "
                        f"{names[0]}={mu.detach().item():.6g} "
                        f"(min denominator {den.min().item():.6g})")
                b_cols[qi] = clip01((mu * atze_q[..., qi] - gammas[qi] - alpha) / den)
        return torch.stack(b_cols, dim=-1).reshape(bsz, self.n)

    @staticmethod
    def _slack_dual(ab, theta, z, eta, w_prev, relu_w_prev, o_r, o_p):
        w = theta - o_r * ab - (1.0 - o_r) * (theta - z) - eta
        relu_w = torch.relu(w)
        z_new = relu_w + o_p * (relu_w - relu_w_prev)
        eta_new = z_new - (1.0 + o_p) * w + o_p * w_prev
        return z_new, eta_new, w, relu_w

    def _init_bits(self, bsz):
        b = torch.full((bsz, self.n), 0.5, dtype=REAL)
        w0 = self.theta - b @ self.a.T
        return b, torch.relu(w0), torch.zeros_like(w0), w0, torch.relu(w0)

    # -- forward ------------------------------------------------------------

    def forward(self, y, s_p, params=None, *, layers=None):
        """Per-layer relaxed-bit trajectory of one frame batch.

        y: (n_r, T) or (B, n_r, T); s_p likewise. Returns a list of layers
        tensors b^l, each (B, N) (batch axis dropped when the input had
        none). Gradients flow into the given per-layer parameters.
        """
        params = self.params if params is None else self._check_params(params)
        if params is None:
            raise ValueError("no parameters: pass params= here or at construction")
        depth = self.l_max if layers is None else int(layers)
        if not 1 <= depth <= self.l_max:
            raise ValueError(f"layers must lie in [1, {self.l_max}]")
        y, s_p, n_t, t_p, t_d, pos, inv, squeeze = self._prepare(y, s_p)
        if self.network == "jcddnet-g":
            traj = self._forward_g(y, s_p, params, depth, n_t, t_p, t_d, pos, inv)
        else:
            traj = self._forward_s(y, s_p, params, depth, n_t, t_p, t_d, pos, inv)
        return [b[0] for b in traj] if squeeze else traj

    def _forward_g(self, y, s_p, params, depth, n_t, t_p, t_d, pos, inv):
        bsz = y.shape[0]
        y_d = y[:, :, t_p:]
        eye = torch.eye(n_t, dtype=CPLX)
        b, z, eta, w_prev, relu_w_prev = self._init_bits(bsz)
        lam0 = None
        traj = []
        for n in range(1, depth + 1):
            vals = self._layer_vals(params, n - 1)
            sym = map_word(b.view(bsz, self.n_sym, self.q), self.q)
            f_prev = sym[:, inv].reshape(bsz, n_t, t_d)
            s_prev = torch.cat([s_p, f_prev], dim=2)
            ridge = vals["o_ups"] if self.unfolded else torch.ones((), dtype=REAL)
            ups = ridge * (self.sigma2 / self.var_g)
            gram = s_prev @ s_prev.mH + ups * eye
            chol = torch.linalg.cholesky(gram)
            v = torch.cholesky_solve(s_prev @ y.mH, chol).mH
            m = v.mH @ v
            if self.unfolded:
                # the reference solver bounds v^H v afresh each layer and then
                # shifts d to the frozen scaled bound; the fresh bound cancels
                # exactly, so d is formed at o_lam * lam0 directly
                if lam0 is None:
                    lam0 = _power_iter_batch(m)
                lam = vals["o_lam"] * lam0
            else:
                lam = _power_iter_batch(m)
            d = lam[:, None, None] * f_prev - m @ f_prev + v.mH @ y_d
            d_sym = d.reshape(bsz, n_t * t_d)[:, pos]
            try:
                b = self._sweep(b, self.theta - z - eta, lam, d_sym,
                                vals["mu"], vals["alpha"], ("mu", "alpha"))
            except ValueError as err:
                raise ValueError(f"layer {n}: {err}") from None
            z, eta, w_prev, relu_w_prev = self._slack_dual(
                b @ self.a.T, self.theta, z, eta, w_prev, relu_w_prev,
                vals["o_r"], vals["o_p"])
            traj.append(b)
        return traj

    def _forward_s(self, y, s_p, params, depth, n_t, t_p, t_d, pos, inv):
        bsz = y.shape[0]
        y_p = y[:, :, :t_p]
        y_d = y[:, :, t_p:]
        frh_y = self.f_r.mH @ y
        gram = s_p @ s_p.mH + self.sigma2 * torch.eye(n_t, dtype=CPLX)
        g0 = torch.cholesky_solve(s_p @ y_p.mH, torch.linalg.cholesky(gram)).mH
        g_s = self.f_r.mH @ g0 @ self.f_t
        b, u, omega, w_prev, relu_w_prev = self._init_bits(bsz)
        chi0 = None
        if self.unfolded:
            g = self.f_r @ g_s @ self.f_t.mH
            chi0 = _power_iter_batch(g.mH @ g, iters=500, tol=1e-10,
                                     cushion=1e-10)
        traj = []
        for n in range(1, depth + 1):
            vals = self._layer_vals(params, n - 1)
            tau = vals["tau"]
            if tau.item() <= 0:
                raise ValueError(f"layer {n}: tau must be positive, "
                                 f"got {tau.item()}")
            sym = map_word(b.view(bsz, self.n_sym, self.q), self.q)
            f_prev = sym[:, inv].reshape(bsz, n_t, t_d)
            s_b = torch.cat([s_p, f_prev], dim=2)
            m2 = self.f_t.mH @ s_b
            grad = (g_s @ m2 - frh_y) @ m2.mH
            g_s = shrinkage(g_s - tau * grad, self.sigma2 * vals["eps"] * tau)
            g = self.f_r @ g_s @ self.f_t.mH
            if self.unfolded:
                chi = vals["rho_chi"] * chi0
            else:
                chi = _power_iter_batch(g.mH @ g, iters=500, tol=1e-10,
                                        cushion=1e-10)
            xi = chi[:, None, None] * f_prev - (g.mH @ g) @ f_prev + g.mH @ y_d
            xi_sym = xi.reshape(bsz, n_t * t_d)[:, pos]
            try:
                b = self._sweep(b, self.theta - u - omega, chi, xi_sym,
                                vals["rho"], vals["kappa"], ("rho", "kappa"))
            except ValueError as err:
                raise ValueError(f"layer {n}: {err}") from None
            u, omega, w_prev, relu_w_prev = self._slack_dual(
                b @ self.a.T, self.theta, u, omega, w_prev, relu_w_prev,
                vals["rho_r"], vals["rho_p"])
            traj.append(b)
        return traj


def beamspace_dft(n_y, n_z):
    """Unitary 2-D DFT (kron of the per-axis DFTs) for UPA beamspace."""
    fy = np.fft.fft(np.eye(n_y)) / np.sqrt(n_y)
    fz = np.fft.fft(np.eye(n_z)) / np.sqrt(n_z)
    return np.kron(fy, fz)
