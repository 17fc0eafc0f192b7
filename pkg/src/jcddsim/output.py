"""Common result container for all receivers."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ReceiverOutput:
    """What every receiver hands back to the harness.

    bits: hard codeword decision (stacked over users);
    g_hat: channel estimate in the antenna domain, or None;
    converged: early-termination / syndrome flag;
    iterations: ADMM layers or turbo rounds actually executed;
    diagnostics: receiver-specific extras;
    trajectory: optional per-layer relaxed bit vectors (tuner input).
    """

    bits: np.ndarray
    g_hat: np.ndarray | None
    converged: bool
    iterations: int
    diagnostics: dict = field(default_factory=dict)
    trajectory: list | None = None
