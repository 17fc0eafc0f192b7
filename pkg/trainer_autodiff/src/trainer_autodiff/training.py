"""Multistage training of per-layer parameters with exact gradients.

Layers are trained L_part at a time: stage s optimizes layers
(s-1)*L_part+1 .. s*L_part against the unfolded loss summed over exactly
that window, with every earlier layer frozen at its already-trained value
and later layers untouched until their stage. Positive parameters live in
log space so Adam steps cannot leave the feasible set. A non-finite loss
(or a solver infeasibility raised by the stack) aborts the run and returns
the last checkpoint that completed an epoch cleanly.
"""

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .stacks import REAL, CPLX
from .tables import LOG_NAMES, PARAM_NAMES, table_from_columns, validate_columns

_EVAL_CHUNK = 64


@dataclass(frozen=True)
class TrainSettings:
    """Protocol knobs; the full-scale defaults are batch 200, 100 epochs,
    learning rate 0.01, stages of 20 layers."""

    network: str
    l_max: int
    l_part: int = 20
    batch_size: int = 200
    epochs: int = 100
    lr: float = 0.01
    sharpness: float = 200.0
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.network not in PARAM_NAMES:
            raise ValueError(f"unknown network id '{self.network}'")
        if self.l_max < 1 or not 1 <= self.l_part:
            raise ValueError("l_max and l_part must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.lr <= 0 or self.sharpness <= 0:
            raise ValueError("lr and sharpness must be positive")

    @property
    def stages(self):
        """(lo, hi) layer windows, 1-based inclusive."""
        out = []
        lo = 1
        while lo <= self.l_max:
            out.append((lo, min(lo + self.l_part - 1, self.l_max)))
            lo += self.l_part
        return out


@dataclass
class TrainResult:
    columns: dict
    table: dict
    aborted: bool = False
    abort_reason: str = None
    history: list = field(default_factory=list)
    stage_columns: list = field(default_factory=list)


def frames_to_tensors(records):
    """Stack dataset records into (y, s_p, bits) training tensors."""
    y = torch.as_tensor(np.stack([r["y"] for r in records]), dtype=CPLX)
    s_p = torch.as_tensor(np.stack([r["s_p"] for r in records]), dtype=CPLX)
    bits = torch.as_tensor(
        np.stack([np.asarray(r["bits"], dtype=float) for r in records]),
        dtype=REAL)
    return y, s_p, bits


def unfolded_loss(trajectory, bits, sharpness, window):
    """Mean over the batch of the windowed sign-approximation loss.

    Sum over layers lo..hi (1-based, inclusive) of
    ||tanh(sharpness*(b^l - 0.5)) - (2 bits - 1)||^2; a trajectory shorter
    than the window is frozen at its last iterate.
    """
    lo, hi = int(window[0]), int(window[1])
    if lo < 1 or hi < lo:
        raise ValueError(f"bad layer window ({lo}, {hi})")
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    target = 2.0 * bits - 1.0
    bsz = trajectory[0].shape[0] if trajectory[0].ndim == 2 else 1
    total = None
    for layer in range(lo, hi + 1):
        b = trajectory[min(layer, len(trajectory)) - 1]
        t = torch.tanh(sharpness * (b - 0.5))
        term = ((t - target) ** 2).sum()
        total = term if total is None else total + term
    return total / bsz


def _as_param_graph(cols, leaves, window, network, depth):
    """Full-length parameter tensors with the window replaced by the
    (transformed) trainable leaves; layers outside the window stay
    constant."""
    lo, hi = window
    out = {}
    for name in PARAM_NAMES[network]:
        live = torch.exp(leaves[name]) if name in LOG_NAMES[network] else leaves[name]
        parts = [torch.as_tensor(cols[name][:lo - 1], dtype=REAL), live,
                 torch.as_tensor(cols[name][hi:], dtype=REAL)]
        out[name] = torch.cat(parts)
    return out


def evaluate_loss(stack, frames, cols, *, sharpness=200.0, window=None,
                  layers=None):
    """Windowed loss of fixed columns over records or (y, s_p, bits) tensors."""
    y, s_p, bits = frames if isinstance(frames, tuple) else frames_to_tensors(frames)
    depth = stack.l_max if layers is None else int(layers)
    window = (1, depth) if window is None else window
    params = {name: torch.as_tensor(np.asarray(cols[name]), dtype=REAL)
              for name in PARAM_NAMES[stack.network]}
    total = 0.0
    count = 0
    with torch.no_grad():
        for start in range(0, y.shape[0], _EVAL_CHUNK):
            sl = slice(start, start + _EVAL_CHUNK)
            traj = stack.forward(y[sl], s_p[sl], params, layers=depth)
            bsz = y[sl].shape[0]
            total += unfolded_loss(traj, bits[sl], sharpness, window).item() * bsz
            count += bsz
    return total / count


def train_multistage(stack, records, settings, *, init=None, holdout=None):
    """Stage-wise Adam training; returns the trained table and run history.

    records: dataset records (or a (y, s_p, bits) tensor triple); init:
    warm-start columns, defaults otherwise unavailable for jcddnet-s (tau
    is setup-specific), so sparse runs must pass them. holdout: records
    evaluated after each stage, never trained on.
    """
    if settings.network != stack.network:
        raise ValueError(f"settings network '{settings.network}' does not "
                         f"match stack '{stack.network}'")
    if settings.l_max != stack.l_max:
        raise ValueError("settings and stack disagree on l_max")
    names = PARAM_NAMES[settings.network]
    if init is None:
        raise ValueError("pass init= warm-start columns (see default_columns)")
    validate_columns(settings.network, init)
    if len(next(iter(init.values()))) != settings.l_max:
        raise ValueError(f"init columns must have length {settings.l_max}")
    cols = {name: np.asarray(init[name], dtype=float).copy() for name in names}

    frames = records if isinstance(records, tuple) else frames_to_tensors(records)
    y_all, s_p_all, bits_all = frames
    n_frames = y_all.shape[0]
    hold_frames = None
    if holdout is not None:
        hold_frames = holdout if isinstance(holdout, tuple) else frames_to_tensors(holdout)

    result = TrainResult(columns=cols, table=None)
    last_good = copy.deepcopy(cols)
    rng = np.random.default_rng(settings.seed)

    def abort(reason):
        result.aborted = True
        result.abort_reason = reason
        for name in names:
            cols[name][:] = last_good[name]

    for s, (lo, hi) in enumerate(settings.stages, start=1):
        leaves = {}
        for name in names:
            seg = cols[name][lo - 1:hi]
            if name in LOG_NAMES[settings.network]:
                if np.any(seg <= 0):
                    raise ValueError(
                        f"log-space parameter '{name}' needs a positive warm "
                        f"start in layers {lo}..{hi}")
                seg = np.log(seg)
            leaves[name] = torch.tensor(seg, dtype=REAL, requires_grad=True)
        opt = torch.optim.Adam(leaves.values(), lr=settings.lr,
                               betas=settings.adam_betas)
        epoch_losses = []
        stopped = False
        for epoch in range(1, settings.epochs + 1):
            order = rng.permutation(n_frames)
            batch_losses = []
            for start in range(0, n_frames, settings.batch_size):
                idx = torch.as_tensor(order[start:start + settings.batch_size])
                opt.zero_grad()
                params = _as_param_graph(cols, leaves, (lo, hi),
                                         settings.network, hi)
                try:
                    traj = stack.forward(y_all[idx], s_p_all[idx], params,
                                         layers=hi)
                    loss = unfolded_loss(traj, bits_all[idx],
                                         settings.sharpness, (lo, hi))
                except (ValueError, torch.linalg.LinAlgError) as err:
                    # infeasible sweep or NaN-poisoned factorization: both
                    # are divergence, both roll back to the checkpoint
                    abort(f"stage {s} epoch {epoch}: {err}")
                    stopped = True
                    break
                if not torch.isfinite(loss):
                    abort(f"stage {s} epoch {epoch}: non-finite training loss")
                    stopped = True
                    break
                loss.backward()
                opt.step()
                batch_losses.append(loss.item())
            if stopped:
                break
            if not all(torch.isfinite(leaf).all() for leaf in leaves.values()):
                abort(f"stage {s} epoch {epoch}: parameters left the finite "
                      f"range")
                stopped = True
                break
            # epoch completed cleanly: it becomes the abort fallback
            _write_back(cols, leaves, settings.network, lo, hi)
            last_good = copy.deepcopy(cols)
            epoch_losses.append(float(np.mean(batch_losses)))
        entry = {"stage": s, "window": (lo, hi), "epoch_losses": epoch_losses,
                 "holdout_loss": None}
        if not stopped and hold_frames is not None:
            entry["holdout_loss"] = evaluate_loss(
                stack, hold_frames, cols, sharpness=settings.sharpness,
                window=(1, hi), layers=hi)
        result.history.append(entry)
        if stopped:
            break
        result.stage_columns.append(copy.deepcopy(cols))

    result.columns = cols
    result.table = table_from_columns(settings.network, cols,
                                      provenance="trained")
    return result


def _write_back(cols, leaves, network, lo, hi):
    for name, leaf in leaves.items():
        vals = leaf.detach().numpy()
        cols[name][lo - 1:hi] = np.exp(vals) if name in LOG_NAMES[network] else vals
