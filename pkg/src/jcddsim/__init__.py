"""Link-level simulation of LDPC-coded MIMO receivers.

Subpackages cover the binary code layer (gf2code), modulation (modem),
channel models (channel), the ADMM-based joint receivers (jcdd_gaussian,
jcdd_sparse), turbo-style baselines (baselines), parameter tuning (tuner)
and the Monte-Carlo harness (harness, cli).
"""

__version__ = "0.1.0"
