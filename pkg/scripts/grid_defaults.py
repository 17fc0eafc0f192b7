"""Coarse grid search behind the shipped solver defaults.

Reruns the refinement grids at the acceptance operating points and writes
the committed JSON artifacts under src/jcddsim/data/. The Gaussian grid
scores (mu, alpha) on the iid 8x4 QPSK setup at the noise levels where the
decoupled baseline sits near 10-20% BLER; the sparse grid scores
(rho, kappa) on the desk-scale SV channel at the matching operating point,
where convergence is slow and the iteration cap has to be generous.

Usage: python3 scripts/grid_defaults.py [--network g|s|both] [--frames N]
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from jcddsim import channel as ch
from jcddsim import jcdd_gaussian as jg
from jcddsim import jcdd_sparse as js
from jcddsim.gf2code import Encoder, build_parity_polytope, generate_regular_code
from jcddsim.modem import constellation

DATA_DIR = Path(__file__).resolve().parent.parent / "src" / "jcddsim" / "data"

QPSK = constellation("qpsk")
CODE = generate_regular_code(96, 3, 6, seed=13)
POLY = build_parity_polytope(CODE)
ENC = Encoder(CODE)
FRAME_CFG = ch.FrameConfig(n_t=4, n_r=8, t_p=4, q=2)


def _gauss_grid(n_frames):
    mus = [0.25, 0.5, 1.0, 2.0]
    alphas = [4.0, 6.0, 8.0, 12.0, 16.0]
    sigma2s = [1.0, 1.3]
    model = ch.IidChannel(n_r=8, n_t=4)
    errors = {}
    iters = {}
    for s2 in sigma2s:
        rng = np.random.default_rng(51)
        frames = [ch.make_frame(FRAME_CFG, model, [ENC], s2, QPSK, rng)
                  for _ in range(n_frames)]
        err_tab = np.zeros((len(mus), len(alphas)), dtype=int)
        it_tab = np.zeros((len(mus), len(alphas)))
        for i, mu in enumerate(mus):
            for j, alpha in enumerate(alphas):
                params = jg.LayerParamsG.constant(mu=mu, alpha=alpha,
                                                  layers=1)
                for fr in frames:
                    out = jg.solve(fr.y, fr.s_p, CODE, POLY, 1.0, fr.sigma2,
                                   QPSK, params=params, max_iter=50)
                    err_tab[i, j] += int(np.any(out.bits != fr.bits))
                    it_tab[i, j] += out.iterations
                print("g mu=%g alpha=%g s2=%g: %d/%d" % (
                    mu, alpha, s2, err_tab[i, j], n_frames))
        errors[str(s2)] = err_tab.tolist()
        iters[str(s2)] = (it_tab / n_frames).round(2).tolist()
    total = sum(np.array(errors[k]) for k in errors)
    mean_it = sum(np.array(iters[k]) for k in iters)
    flat = np.argmin(total + 1e-6 * mean_it)  # errors first, iterations tie-break
    bi, bj = np.unravel_index(flat, total.shape)
    return {
        "network": "jcddnet-g",
        "setup": {"code": "(3,6) regular, N=96, seed 13", "n_r": 8, "n_t": 4,
                  "t_p": 4, "modulation": "qpsk", "channel": "iid",
                  "max_iter": 50, "frames_per_cell": n_frames,
                  "frame_seed": 51},
        "grid": {"mu": mus, "alpha": alphas, "sigma2": sigma2s},
        "block_errors": errors,
        "mean_iterations": iters,
        "chosen": {"mu": mus[bi], "alpha": alphas[bj]},
    }


def _sparse_grid(n_frames):
    rhos = [0.02, 0.03, 0.1, 1.0]
    kappas = [0.2, 0.3, 1.0, 5.0]
    s2 = 5e-5
    max_iter = 1500
    f_t = ch.beamspace_dft(2, 2)
    f_r = ch.beamspace_dft(2, 4)
    model = ch.SalehValenzuelaChannel(2, 4, (2, 2), (2, 4))
    rng = np.random.default_rng(54)
    frames = [ch.make_frame(FRAME_CFG, model, [ENC], s2, QPSK, rng)
              for _ in range(n_frames)]
    err_tab = np.zeros((len(rhos), len(kappas)), dtype=int)
    it_tab = np.zeros((len(rhos), len(kappas)))
    for i, rho in enumerate(rhos):
        for j, kappa in enumerate(kappas):
            try:
                for fr in frames:
                    tau = js.DEFAULT_TAU_SCALE * js.default_tau(fr.s_p, f_t)
                    params = js.LayerParamsS.constant(rho=rho, kappa=kappa,
                                                      eps=1.0, tau=tau,
                                                      layers=1)
                    out = js.solve(fr.y, fr.s_p, CODE, POLY, f_r, f_t,
                                   fr.sigma2, QPSK, params=params,
                                   max_iter=max_iter)
                    err_tab[i, j] += int(np.any(out.bits != fr.bits))
                    it_tab[i, j] += out.iterations
            except ValueError as err:
                # bit-update precondition can fail for kappa >> rho*Lambda
                print("s rho=%g kappa=%g infeasible: %s" % (rho, kappa, err))
                err_tab[i, j] = n_frames + 1
                it_tab[i, j] = max_iter * n_frames
                continue
            print("s rho=%g kappa=%g: %d/%d" % (
                rho, kappa, err_tab[i, j], n_frames))
    flat = np.argmin(err_tab + 1e-6 * it_tab / n_frames)
    bi, bj = np.unravel_index(flat, err_tab.shape)
    return {
        "network": "jcddnet-s",
        "setup": {"code": "(3,6) regular, N=96, seed 13", "n_r": 8, "n_t": 4,
                  "t_p": 4, "modulation": "qpsk",
                  "channel": "saleh-valenzuela n_cl=2 n_p=4 2x2->2x4 UPA",
                  "sigma2": s2, "max_iter": max_iter,
                  "frames_per_cell": n_frames, "frame_seed": 54,
                  "eps": 1.0, "tau_scale": js.DEFAULT_TAU_SCALE},
        "grid": {"rho": rhos, "kappa": kappas},
        "block_errors": err_tab.tolist(),
        "mean_iterations": (it_tab / n_frames).round(1).tolist(),
        "chosen": {"rho": rhos[bi], "kappa": kappas[bj], "eps": 1.0,
                   "tau_scale": js.DEFAULT_TAU_SCALE},
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--network", choices=("g", "s", "both"), default="both")
    ap.add_argument("--frames", type=int, default=100)
    ap.add_argument("--out-dir", type=Path, default=DATA_DIR)
    args = ap.parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    if args.network in ("g", "both"):
        t0 = time.time()
        result = _gauss_grid(args.frames)
        result["runtime_s"] = round(time.time() - t0, 1)
        path = args.out_dir / "default_grid_g.json"
        path.write_text(json.dumps(result, indent=2) + "\n")
        print("wrote", path, "chosen", result["chosen"])
    if args.network in ("s", "both"):
        t0 = time.time()
        result = _sparse_grid(args.frames)
        result["runtime_s"] = round(time.time() - t0, 1)
        path = args.out_dir / "default_grid_s.json"
        path.write_text(json.dumps(result, indent=2) + "\n")
        print("wrote", path, "chosen", result["chosen"])


if __name__ == "__main__":
    main()
