"""Shared fixtures: codes and datasets produced by the simulator CLI.

Every dataset flows through the exported text format, so the tests exercise
the same file interface the trainer sees in production. The simulator
package must be installed; it is also the parity oracle.
"""

import shutil
import subprocess

import pytest

JCDDSIM = shutil.which("jcddsim")

IID_CFG = """\
frame.n_t = 4
frame.n_r = 8
frame.t_p = 4
frame.q = 2
channel.model = iid
code.n = 96
code.d_v = 3
code.d_c = 6
code.seed = 13
receivers = jcdd-g
snr_db = 3
seed = 11
"""

SV_CFG = """\
frame.n_t = 4
frame.n_r = 8
frame.t_p = 4
frame.q = 2
channel.model = sv
channel.n_cl = 3
channel.n_p = 5
channel.tx_grid = 2x2
channel.rx_grid = 4x2
code.n = 96
code.d_v = 3
code.d_c = 6
code.seed = 13
receivers = jcdd-s
snr_db = 8
seed = 21
"""

QAM16_CFG = """\
frame.n_t = 4
frame.n_r = 8
frame.t_p = 4
frame.q = 4
channel.model = iid
code.n = 192
code.d_v = 3
code.d_c = 6
code.seed = 7
receivers = jcdd-g
snr_db = 12
seed = 31
"""


def run_sim(*args):
    if JCDDSIM is None:
        pytest.fail("jcddsim CLI not on PATH; install the simulator package")
    proc = subprocess.run([JCDDSIM, *map(str, args)],
                          capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(
            f"jcddsim {' '.join(map(str, args))} failed: {proc.stderr}")
    return proc.stdout


@pytest.fixture(scope="session")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("fixtures")


@pytest.fixture(scope="session")
def alist96(work):
    path = work / "code96.alist"
    run_sim("codegen", "--n", 96, "--d-v", 3, "--d-c", 6, "--seed", 13,
            "--out", path)
    return path


@pytest.fixture(scope="session")
def alist192(work):
    path = work / "code192.alist"
    run_sim("codegen", "--n", 192, "--d-v", 3, "--d-c", 6, "--seed", 7,
            "--out", path)
    return path


def _export(work, name, cfg_text, snr, frames, seed):
    cfg = work / f"{name}.cfg"
    cfg.write_text(cfg_text)
    out = work / f"{name}.txt"
    run_sim("export-dataset", "--config", cfg, "--snr", snr,
            "--frames", frames, "--seed", seed, "--out", out)
    return out


@pytest.fixture(scope="session")
def ds_g(work, alist96):
    """12 QPSK frames on the iid channel at 3 dB."""
    return _export(work, "ds_g", IID_CFG, 3, 12, 11)


@pytest.fixture(scope="session")
def ds_g16(work, alist192):
    """6 16QAM frames on the iid channel at 12 dB."""
    return _export(work, "ds_g16", QAM16_CFG, 12, 6, 31)


@pytest.fixture(scope="session")
def ds_s(work, alist96):
    """12 QPSK frames on the SV channel (2x2 -> 4x2 UPA) at 8 dB."""
    return _export(work, "ds_s", SV_CFG, 8, 12, 21)


@pytest.fixture(scope="session")
def ds_train(work, alist96):
    """180 training frames, same setup as ds_g."""
    return _export(work, "ds_train", IID_CFG, 3, 180, 77)


@pytest.fixture(scope="session")
def ds_train_s(work, alist96):
    """90 sparse-path training frames, same setup as ds_s."""
    return _export(work, "ds_train_s", SV_CFG, 8, 90, 41)


@pytest.fixture(scope="session")
def ds_fresh(work, alist96):
    """300 held-back frames for paired receiver comparisons."""
    return _export(work, "ds_fresh", IID_CFG, 3, 300, 99)
