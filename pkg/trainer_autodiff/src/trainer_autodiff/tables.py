"""Per-layer parameter tables: defaults, validation, JSON round trip.

The JSON schema ({"network", "l_max", "layers", "provenance"}) is shared
with the solver package; a table written here must pass its validate-table
command unchanged. Floats are written with repr precision so values
round-trip exactly.
"""

import json
import math
from pathlib import Path

import numpy as np

PARAM_NAMES = {
    "jcddnet-g": ("mu", "alpha", "o_r", "o_p", "o_lam", "o_ups"),
    "jcddnet-s": ("rho", "kappa", "eps", "tau", "rho_chi", "rho_r", "rho_p"),
}
STRICT_POSITIVE = {
    "jcddnet-g": ("mu", "o_lam", "o_ups"),
    "jcddnet-s": ("rho", "eps", "tau", "rho_chi"),
}
NONNEGATIVE = {
    "jcddnet-g": ("alpha",),
    "jcddnet-s": ("kappa",),
}
# Trained multiplicatively (log-space leaves keep them positive); the
# relaxation/acceleration knobs train additively.
LOG_NAMES = {
    "jcddnet-g": ("mu", "alpha", "o_lam", "o_ups"),
    "jcddnet-s": ("rho", "kappa", "eps", "tau", "rho_chi"),
}
PROVENANCE = ("grid-search", "tuned", "trained")

# Grid-searched solver defaults; also the warm start for training. tau has
# no setup-independent value (it anchors to the pilot Gram).
GAUSSIAN_DEFAULTS = {"mu": 1.0, "alpha": 12.0, "o_r": 1.0, "o_p": 0.0,
                     "o_lam": 1.0, "o_ups": 1.0}
SPARSE_DEFAULTS = {"rho": 0.03, "kappa": 0.3, "eps": 1.0, "rho_chi": 1.0,
                   "rho_r": 1.0, "rho_p": 0.0}
DEFAULT_TAU_SCALE = 0.25


def default_tau(s_p, f_t):
    """Pilot-anchored PGD stepsize 1/lam_max((F_t^H S_P)(F_t^H S_P)^H)."""
    m = np.asarray(f_t).conj().T @ np.asarray(s_p)
    lmax = float(np.linalg.eigvalsh(m @ m.conj().T)[-1])
    if lmax <= 0:
        raise ValueError("pilot block carries no energy")
    return 1.0 / lmax


def default_columns(network, l_max, *, tau=None):
    """Constant default columns, one value per layer."""
    if network == "jcddnet-g":
        if tau is not None:
            raise ValueError("tau only applies to jcddnet-s")
        base = dict(GAUSSIAN_DEFAULTS)
    elif network == "jcddnet-s":
        if tau is None:
            raise ValueError("jcddnet-s defaults need an explicit tau")
        base = dict(SPARSE_DEFAULTS, tau=float(tau))
    else:
        raise ValueError(f"unknown network id '{network}'")
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    return {name: np.full(l_max, base[name]) for name in PARAM_NAMES[network]}


def validate_columns(network, cols):
    """Check names, finiteness and sign constraints of a column dict."""
    if network not in PARAM_NAMES:
        raise ValueError(f"unknown network id '{network}'")
    names = PARAM_NAMES[network]
    if set(cols) != set(names):
        raise ValueError(f"expected exactly the columns {sorted(names)}")
    l_max = len(next(iter(cols.values())))
    for name in names:
        col = np.asarray(cols[name], dtype=float)
        if col.shape != (l_max,):
            raise ValueError(f"column '{name}' must have length {l_max}")
        if not np.all(np.isfinite(col)):
            raise ValueError(f"column '{name}' carries non-finite values")
        if name in STRICT_POSITIVE[network] and np.any(col <= 0):
            raise ValueError(f"column '{name}' must be positive")
        if name in NONNEGATIVE[network] and np.any(col < 0):
            raise ValueError(f"column '{name}' must be nonnegative")
    return l_max


def table_from_columns(network, cols, provenance="trained"):
    """JSON payload dict from per-layer columns."""
    if provenance not in PROVENANCE:
        raise ValueError(f"provenance must be one of {PROVENANCE}")
    l_max = validate_columns(network, cols)
    layers = [{name: float(cols[name][i]) for name in PARAM_NAMES[network]}
              for i in range(l_max)]
    return {"network": network, "l_max": l_max, "layers": layers,
            "provenance": provenance}


def columns_from_table(payload):
    """Per-layer columns from a validated payload dict."""
    payload = validate_table(payload)
    names = PARAM_NAMES[payload["network"]]
    return {name: np.array([layer[name] for layer in payload["layers"]])
            for name in names}


def validate_table(payload):
    """Validate a payload dict in place; raises ValueError on any defect."""
    if not isinstance(payload, dict):
        raise ValueError("table must be a JSON object")
    required = {"network", "l_max", "layers", "provenance"}
    missing = sorted(required - payload.keys())
    if missing:
        raise ValueError(f"table missing key(s): {', '.join(missing)}")
    extra = sorted(payload.keys() - required)
    if extra:
        raise ValueError(f"table has unknown key(s): {', '.join(extra)}")
    network = payload["network"]
    if network not in PARAM_NAMES:
        raise ValueError(f"unknown network id '{network}'")
    if payload["provenance"] not in PROVENANCE:
        raise ValueError(f"provenance must be one of {PROVENANCE}")
    l_max = int(payload["l_max"])
    layers = payload["layers"]
    if not isinstance(layers, list) or len(layers) != l_max or l_max < 1:
        raise ValueError(f"l_max={payload['l_max']} does not match the layer list")
    names = set(PARAM_NAMES[network])
    for idx, layer in enumerate(layers, start=1):
        missing = sorted(names - set(layer))
        if missing:
            raise ValueError(f"layer {idx} missing key(s): {', '.join(missing)}")
        extra = sorted(set(layer) - names)
        if extra:
            raise ValueError(f"layer {idx} has unknown key(s): {', '.join(extra)}")
        for name, value in layer.items():
            v = float(value)
            if not math.isfinite(v):
                raise ValueError(f"layer {idx}: {name} is not finite")
            if name in STRICT_POSITIVE[network] and v <= 0:
                raise ValueError(f"layer {idx}: {name} must be positive")
            if name in NONNEGATIVE[network] and v < 0:
                raise ValueError(f"layer {idx}: {name} must be nonnegative")
    return payload


def export_table(payload, path):
    """Write a validated payload as JSON."""
    validate_table(payload)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def import_table(path):
    """Read and validate a table file."""
    return validate_table(json.loads(Path(path).read_text()))
