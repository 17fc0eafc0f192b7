"""Offline tuning of per-layer solver parameters.

The unfolded training loss drives a gradient-free multistage search: layers
are grown L_part at a time, each stage perturbing only its own window with a
simultaneous-perturbation (SPSA-style) scheme while earlier layers stay
frozen. Positive parameters are searched in log space so sign constraints
hold by construction. A tuned table is only returned if it beats the default
table on the validation frames; otherwise the default comes back unchanged.

Parameter tables serialize to JSON ({"network", "l_max", "layers",
"provenance"}) and convert to the solver-side LayerParams tables, with
inference depths beyond the trained prefix padded by default values.
"""

import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import jcdd_gaussian as jg
from . import jcdd_sparse as js

logger = logging.getLogger(__name__)

_NETWORK_NAMES = {
    "jcddnet-g": ("mu", "alpha", "o_r", "o_p", "o_lam", "o_ups"),
    "jcddnet-s": ("rho", "kappa", "eps", "tau", "rho_chi", "rho_r", "rho_p"),
}
_STRICT_POSITIVE = {
    "jcddnet-g": ("mu", "o_lam", "o_ups"),
    "jcddnet-s": ("rho", "eps", "tau", "rho_chi"),
}
_NONNEGATIVE = {
    "jcddnet-g": ("alpha",),
    "jcddnet-s": ("kappa",),
}
# Searched multiplicatively; the relaxation/acceleration knobs stay additive.
_LOG_NAMES = {
    "jcddnet-g": ("mu", "alpha", "o_lam", "o_ups"),
    "jcddnet-s": ("rho", "kappa", "eps", "tau", "rho_chi"),
}
# tau is absent on purpose: the safe stepsize anchors to the pilot Gram and
# has no setup-independent value.
_UNIVERSAL_DEFAULTS = {
    "jcddnet-g": {"mu": jg.DEFAULT_MU, "alpha": jg.DEFAULT_ALPHA, "o_r": 1.0,
                  "o_p": 0.0, "o_lam": 1.0, "o_ups": 1.0},
    "jcddnet-s": {"rho": js.DEFAULT_RHO, "kappa": js.DEFAULT_KAPPA,
                  "eps": js.DEFAULT_EPS, "rho_chi": 1.0, "rho_r": 1.0,
                  "rho_p": 0.0},
}
_PROVENANCE = ("grid-search", "tuned", "trained")

# Gain schedule of the stage search: first step / perturbation sizes with the
# standard decay exponents; the trust radius bounds each coordinate's total
# drift from the stage start (a factor of e^0.7 for log-space names).
_SPSA_A = 0.15
_SPSA_C = 0.1
_SPSA_DECAY_A = 0.602
_SPSA_DECAY_C = 0.101
_TRUST = 0.7


@dataclass(frozen=True)
class ParamTable:
    """Serializable per-layer parameter table for one solver network."""

    network: str
    l_max: int
    layers: tuple
    provenance: str = "grid-search"

    def __post_init__(self):
        if self.network not in _NETWORK_NAMES:
            raise ValueError(f"unknown network id '{self.network}'")
        if self.provenance not in _PROVENANCE:
            raise ValueError(
                f"provenance must be one of {_PROVENANCE}, "
                f"got '{self.provenance}'")
        l_max = int(self.l_max)
        if l_max < 1:
            raise ValueError("l_max must be >= 1")
        if len(self.layers) != l_max:
            raise ValueError(
                f"l_max={l_max} does not match {len(self.layers)} layers")
        names = set(_NETWORK_NAMES[self.network])
        strict = _STRICT_POSITIVE[self.network]
        nonneg = _NONNEGATIVE[self.network]
        clean = []
        for idx, layer in enumerate(self.layers, start=1):
            missing = sorted(names - set(layer))
            if missing:
                raise ValueError(
                    f"layer {idx} missing key(s): {', '.join(missing)}")
            extra = sorted(set(layer) - names)
            if extra:
                raise ValueError(
                    f"layer {idx} has unknown key(s): {', '.join(extra)}")
            vals = {}
            for name, value in layer.items():
                v = float(value)
                if not np.isfinite(v):
                    raise ValueError(f"layer {idx}: {name} is not finite")
                vals[name] = v
            for name in strict:
                if vals[name] <= 0:
                    raise ValueError(f"layer {idx}: {name} must be positive")
            for name in nonneg:
                if vals[name] < 0:
                    raise ValueError(
                        f"layer {idx}: {name} must be nonnegative")
            clean.append(vals)
        object.__setattr__(self, "l_max", l_max)
        object.__setattr__(self, "layers", tuple(clean))

    def column(self, name):
        """Per-layer values of one parameter as an array."""
        if name not in _NETWORK_NAMES[self.network]:
            raise ValueError(f"'{name}' is not a {self.network} parameter")
        return np.array([layer[name] for layer in self.layers])


def default_params(network):
    """Committed grid-search record behind the module default constants.

    Returns the full artifact (setup, grid axes, per-cell block errors and
    mean iteration counts, chosen cell) so the provenance of DEFAULT_MU /
    DEFAULT_ALPHA and DEFAULT_RHO / DEFAULT_KAPPA stays auditable. The
    chosen cell must match the constants; scripts/grid_defaults.py rebuilds
    the artifacts.
    """
    name = {"jcddnet-g": "default_grid_g.json",
            "jcddnet-s": "default_grid_s.json"}.get(network)
    if name is None:
        raise ValueError(f"unknown network '{network}'")
    ref = resources.files("jcddsim.data").joinpath(name)
    return json.loads(ref.read_text())


def default_table(network, l_max, *, tau=None, provenance="grid-search"):
    """All-default table of the given depth.

    jcddnet-s needs an explicit tau: the safe stepsize anchors to the pilot
    Gram of the concrete setup.
    """
    if network not in _NETWORK_NAMES:
        raise ValueError(f"unknown network id '{network}'")
    base = dict(_UNIVERSAL_DEFAULTS[network])
    if network == "jcddnet-s":
        if tau is None:
            raise ValueError("a jcddnet-s default table needs tau")
        base["tau"] = float(tau)
    elif tau is not None:
        raise ValueError("tau only applies to jcddnet-s tables")
    layers = tuple(dict(base) for _ in range(int(l_max)))
    return ParamTable(network, int(l_max), layers, provenance)


def export_table(table, path):
    """Write a table as JSON; floats round-trip exactly."""
    payload = {
        "network": table.network,
        "l_max": table.l_max,
        "layers": [dict(layer) for layer in table.layers],
        "provenance": table.provenance,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def import_table(path):
    """Read and validate a table written by export_table."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("table file must hold a JSON object")
    required = {"network", "l_max", "layers", "provenance"}
    missing = sorted(required - data.keys())
    if missing:
        raise ValueError(f"table file missing key(s): {', '.join(missing)}")
    extra = sorted(data.keys() - required)
    if extra:
        raise ValueError(f"table file has unknown key(s): {', '.join(extra)}")
    if not isinstance(data["layers"], list):
        raise ValueError("layers must be a list of name:value maps")
    return ParamTable(data["network"], data["l_max"], tuple(data["layers"]),
                      data["provenance"])


def to_layer_params(table, layers=None, defaults=None):
    """Solver-side LayerParams (network mode) from a table.

    Running deeper than the trained depth pads the extra layers with default
    values; tau has no universal default, so padding a jcddnet-s table needs
    an explicit defaults map carrying one.
    """
    depth = table.l_max if layers is None else int(layers)
    if depth < 1:
        raise ValueError("layers must be >= 1")
    names = _NETWORK_NAMES[table.network]
    pad = None
    if depth > table.l_max:
        pad = dict(_UNIVERSAL_DEFAULTS[table.network])
        if defaults is not None:
            pad.update(defaults)
        missing = sorted(set(names) - set(pad))
        if missing:
            raise ValueError(
                f"padding a {table.network} table needs defaults for: "
                f"{', '.join(missing)}")
    cols = {}
    for name in names:
        col = [layer[name] for layer in table.layers[:depth]]
        if pad is not None:
            col += [float(pad[name])] * (depth - table.l_max)
        cols[name] = np.array(col)
    if table.network == "jcddnet-g":
        return jg.LayerParamsG(cols["mu"], cols["alpha"], cols["o_r"],
                               cols["o_p"], cols["o_lam"], cols["o_ups"],
                               network=True)
    return js.LayerParamsS(cols["rho"], cols["kappa"], cols["eps"],
                           cols["tau"], cols["rho_chi"], cols["rho_r"],
                           cols["rho_p"], network=True)


@dataclass(frozen=True)
class SolverHandle:
    """Bridges the tuner to one solver family on one fixed setup.

    run(frame, params, layers) returns the per-layer relaxed-bit trajectory;
    build(cols) assembles the solver's LayerParams from per-layer columns;
    defaults hold the absolute starting value of every parameter.
    """

    network: str
    defaults: dict
    run: Callable
    build: Callable


def gaussian_handle(code, polytope, prior, spec, *, precoder=None, users=1):
    """Tuner adapter for the Gaussian-path solver."""

    defaults = dict(_UNIVERSAL_DEFAULTS["jcddnet-g"])

    def run(frame, params, layers):
        out = jg.solve(frame.y, frame.s_p, code, polytope, prior,
                       frame.sigma2, spec, params=params, max_iter=layers,
                       record_trajectory=True, precoder=precoder,
                       users=users)
        return out.trajectory

    def build(cols):
        return jg.LayerParamsG(cols["mu"], cols["alpha"], cols["o_r"],
                               cols["o_p"], cols["o_lam"], cols["o_ups"],
                               network=True)

    return SolverHandle("jcddnet-g", defaults, run, build)


def sparse_handle(code, polytope, f_r, f_t, spec, *, tau_anchor):
    """Tuner adapter for the sparse-path solver.

    tau_anchor is the exact-stepsize bound of the setup (default_tau on the
    pilot block); the default tau derates it the same way the solver does.
    """

    defaults = dict(_UNIVERSAL_DEFAULTS["jcddnet-s"])
    defaults["tau"] = js.DEFAULT_TAU_SCALE * float(tau_anchor)

    def run(frame, params, layers):
        out = js.solve(frame.y, frame.s_p, code, polytope, f_r, f_t,
                       frame.sigma2, spec, params=params, max_iter=layers,
                       record_trajectory=True)
        return out.trajectory

    def build(cols):
        return js.LayerParamsS(cols["rho"], cols["kappa"], cols["eps"],
                               cols["tau"], cols["rho_chi"], cols["rho_r"],
                               cols["rho_p"], network=True)

    return SolverHandle("jcddnet-s", defaults, run, build)


@dataclass(frozen=True)
class TrainerConfig:
    """Knobs of the multistage search.

    train_snr_db only records where the caller drew the frames (the usual
    choice is the SNR where the untuned solver sits near 1e-2 BLER); the
    frames themselves come in through tune_multistage.
    """

    l_part: int = 20
    l_max: int = 100
    samples: int = 16
    sharpness: float = 200.0
    budget: int = 40
    seed: int = 0
    train_snr_db: float | None = None

    def __post_init__(self):
        if self.l_part < 1:
            raise ValueError("l_part must be >= 1")
        if self.l_max < 1 or self.l_max % self.l_part:
            raise ValueError(
                f"l_part={self.l_part} must divide l_max={self.l_max}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")

    @property
    def stages(self):
        return self.l_max // self.l_part


def unfolded_loss(trajectory, bits, sharpness, window, *, l_max=None):
    """Unfolded training loss of one trajectory.

    Sum over the window's layers (1-based, inclusive) of
    ||tanh(sharpness * (b^l - 0.5)) - (2b - 1)||^2. A trajectory cut short
    by early termination is frozen at its last iterate. When l_max is given
    the window must stay within [1..l_max].
    """
    lo, hi = int(window[0]), int(window[1])
    if lo < 1 or hi < lo:
        raise ValueError(f"bad layer window ({lo}, {hi})")
    if l_max is not None and hi > int(l_max):
        raise ValueError(f"layer window ({lo}, {hi}) outside [1..{l_max}]")
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    target = 2.0 * np.asarray(bits, dtype=float) - 1.0
    total = 0.0
    for layer in range(lo, hi + 1):
        b = np.asarray(trajectory[min(layer, len(trajectory)) - 1],
                       dtype=float)
        t = np.tanh(sharpness * (b - 0.5))
        total += float(np.sum((t - target) ** 2))
    return total


def _cols_loss(handle, cols, frames, depth, window, sharpness):
    """Mean loss of a column set over frames; solver failures count as inf."""
    try:
        params = handle.build(cols)
    except ValueError:
        return np.inf
    total = 0.0
    for frame in frames:
        try:
            traj = handle.run(frame, params, depth)
        except (ValueError, np.linalg.LinAlgError):
            return np.inf
        val = unfolded_loss(traj, frame.bits, sharpness, window)
        if not np.isfinite(val):
            return np.inf
        total += val
    return total / len(frames)


def table_loss(handle, table, frames, *, sharpness=200.0):
    """Mean full-depth unfolded loss of a table over frames."""
    if table.network != handle.network:
        raise ValueError(
            f"table network '{table.network}' does not match handle "
            f"'{handle.network}'")
    cols = {name: table.column(name)
            for name in _NETWORK_NAMES[table.network]}
    return _cols_loss(handle, cols, frames, table.l_max, (1, table.l_max),
                      sharpness)


def _encode(cols, names, sl, log_names):
    parts = []
    for name in names:
        x = cols[name][sl]
        parts.append(np.log(x) if name in log_names else x)
    return np.concatenate(parts)


def _decode_into(cols, names, sl, vec, log_names, width):
    for i, name in enumerate(names):
        seg = vec[i * width:(i + 1) * width]
        cols[name][sl] = np.exp(seg) if name in log_names else seg


def _vector_loss(handle, cols, names, sl, vec, log_names, width, frames,
                 depth, window, sharpness):
    trial = {name: arr.copy() for name, arr in cols.items()}
    _decode_into(trial, names, sl, vec, log_names, width)
    return _cols_loss(handle, trial, frames, depth, window, sharpness)


def tune_multistage(handle, frames, config, *, holdout=None):
    """Stage-wise SPSA search over the per-layer parameters.

    Stage s grows the network to s * l_part layers and perturbs only that
    window, earlier layers frozen at their tuned values. The returned table
    never validates worse than the default one: if the search fails to beat
    it on the holdout frames (or the training frames when no holdout is
    given), the default table comes back with grid-search provenance.
    """
    if len(frames) == 0:
        raise ValueError("need at least one training frame")
    names = _NETWORK_NAMES[handle.network]
    log_names = set(_LOG_NAMES[handle.network])
    base_cols = {name: np.full(config.l_max, float(handle.defaults[name]))
                 for name in names}
    base = _table_from_cols(handle.network, base_cols, "grid-search")
    if config.budget == 0:
        return base

    rng = np.random.default_rng(config.seed)
    cols = {name: arr.copy() for name, arr in base_cols.items()}
    width = config.l_part
    take = min(config.samples, len(frames))
    for stage in range(1, config.stages + 1):
        depth = stage * config.l_part
        window = (depth - config.l_part + 1, depth)
        sl = slice(depth - config.l_part, depth)
        start = ((stage - 1) * take) % len(frames)
        batch = [frames[(start + i) % len(frames)] for i in range(take)]

        anchor = _encode(cols, names, sl, log_names)
        best_vec = anchor.copy()
        best_loss = _vector_loss(handle, cols, names, sl, anchor, log_names,
                                 width, batch, depth, window,
                                 config.sharpness)
        vec = anchor.copy()
        for k in range(1, config.budget + 1):
            c_k = _SPSA_C / k ** _SPSA_DECAY_C
            a_k = _SPSA_A / k ** _SPSA_DECAY_A
            delta = rng.integers(0, 2, size=vec.size) * 2.0 - 1.0
            loss_plus = _vector_loss(handle, cols, names, sl,
                                     vec + c_k * delta, log_names, width,
                                     batch, depth, window, config.sharpness)
            loss_minus = _vector_loss(handle, cols, names, sl,
                                      vec - c_k * delta, log_names, width,
                                      batch, depth, window, config.sharpness)
            if loss_plus < best_loss:
                best_loss, best_vec = loss_plus, vec + c_k * delta
            if loss_minus < best_loss:
                best_loss, best_vec = loss_minus, vec - c_k * delta
            if loss_plus == loss_minus:
                continue
            # Both probes share one random direction, so the SPSA gradient
            # estimate is a scalar times delta; step by its sign to stay
            # scale-free in the loss.
            vec = vec - a_k * np.sign(loss_plus - loss_minus) * delta
            vec = np.clip(vec, anchor - _TRUST, anchor + _TRUST)
        final_loss = _vector_loss(handle, cols, names, sl, vec, log_names,
                                  width, batch, depth, window,
                                  config.sharpness)
        if final_loss < best_loss:
            best_loss, best_vec = final_loss, vec
        _decode_into(cols, names, sl, best_vec, log_names, width)

    tuned = _table_from_cols(handle.network, cols, "tuned")
    judge = holdout if holdout else frames
    tuned_loss = table_loss(handle, tuned, judge, sharpness=config.sharpness)
    base_loss = table_loss(handle, base, judge, sharpness=config.sharpness)
    if not tuned_loss <= base_loss:
        logger.warning("search budget exhausted without improvement "
                       "(%.6g vs %.6g); keeping the default table",
                       tuned_loss, base_loss)
        return base
    logger.info("tuned %s: validation loss %.6g -> %.6g", handle.network,
                base_loss, tuned_loss)
    return tuned


def _table_from_cols(network, cols, provenance):
    l_max = len(next(iter(cols.values())))
    names = _NETWORK_NAMES[network]
    layers = tuple({name: float(cols[name][i]) for name in names}
                   for i in range(l_max))
    return ParamTable(network, l_max, layers, provenance)
