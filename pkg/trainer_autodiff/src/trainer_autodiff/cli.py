"""Command line trainer: dataset + alist in, trained parameter table out.

Exit codes follow the simulator convention: 0 on success, 2 on config
errors (unreadable files, inconsistent dimensions, bad flags), 3 on runtime
failures.
"""

import argparse
import sys

import numpy as np

from . import codes, dataset, tables
from .stacks import DifferentiableLayerStack, beamspace_dft
from .training import TrainSettings, evaluate_loss, frames_to_tensors, \
    train_multistage


class ConfigError(Exception):
    pass


def build_parser():
    p = argparse.ArgumentParser(
        prog="jcdd-train",
        description="train per-layer JCDD network parameters on an exported "
                    "frame dataset")
    p.add_argument("--dataset", required=True, help="frame dataset text file")
    p.add_argument("--alist", required=True, help="parity-check matrix (alist)")
    p.add_argument("--network", required=True,
                   choices=("jcddnet-g", "jcddnet-s"))
    p.add_argument("--out", required=True, help="output table path (JSON)")
    p.add_argument("--layers", type=int, default=20, help="table depth L_max")
    p.add_argument("--stage", type=int, default=20, help="layers per stage")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--sharpness", type=float, default=200.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout-frac", type=float, default=0.25,
                   help="trailing fraction of records held out")
    p.add_argument("--init-table", help="warm-start table (JSON)")
    p.add_argument("--var-g", type=float, default=1.0,
                   help="channel prior variance of the jcddnet-g ridge")
    p.add_argument("--rx-upa", help="receive UPA grid YxZ (jcddnet-s; "
                                    "default flat 1xN_r)")
    p.add_argument("--tx-upa", help="transmit UPA grid YxZ (jcddnet-s)")
    return p


def _parse_grid(text, total, what):
    try:
        ny, nz = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"{what} must look like '2x4', got '{text}'") from None
    if ny < 1 or nz < 1 or ny * nz != total:
        raise ConfigError(f"{what} {ny}x{nz} does not cover {total} antennas")
    return ny, nz


def _prepare(args):
    meta, records = dataset.load_dataset(args.dataset)
    code = codes.load_alist(args.alist)
    if code.n != int(meta["n"]):
        raise ConfigError(f"code length {code.n} != dataset n={meta['n']}")
    poly = codes.build_parity_polytope(code)
    sigma2 = dataset.common_sigma2(records)
    q = int(meta["q"])
    n_r, n_t = int(meta["n_r"]), int(meta["n_t"])

    f_r = f_t = None
    tau = None
    if args.network == "jcddnet-s":
        rx = _parse_grid(args.rx_upa, n_r, "--rx-upa") if args.rx_upa \
            else (1, n_r)
        tx = _parse_grid(args.tx_upa, n_t, "--tx-upa") if args.tx_upa \
            else (1, n_t)
        f_r = beamspace_dft(*rx)
        f_t = beamspace_dft(*tx)
        tau = tables.DEFAULT_TAU_SCALE * tables.default_tau(
            records[0]["s_p"], f_t)
    elif args.rx_upa or args.tx_upa:
        raise ConfigError("UPA grids only apply to jcddnet-s")

    if args.init_table:
        payload = tables.import_table(args.init_table)
        if payload["network"] != args.network:
            raise ConfigError(
                f"warm-start table is for '{payload['network']}'")
        if payload["l_max"] != args.layers:
            raise ConfigError(
                f"warm-start table depth {payload['l_max']} != --layers "
                f"{args.layers}")
        init = tables.columns_from_table(payload)
    else:
        init = tables.default_columns(args.network, args.layers, tau=tau)

    if not 0 <= args.holdout_frac < 1:
        raise ConfigError("--holdout-frac must lie in [0, 1)")
    n_hold = int(round(args.holdout_frac * len(records)))
    if args.holdout_frac > 0:
        n_hold = min(max(n_hold, 1), len(records) - 1)
    train = records[:len(records) - n_hold]
    hold = records[len(records) - n_hold:] if n_hold else None

    stack = DifferentiableLayerStack(
        args.network, args.layers, poly, q, sigma2, var_g=args.var_g,
        f_r=f_r, f_t=f_t)
    settings = TrainSettings(
        network=args.network, l_max=args.layers, l_part=args.stage,
        batch_size=args.batch, epochs=args.epochs, lr=args.lr,
        sharpness=args.sharpness, seed=args.seed)
    return stack, settings, init, train, hold


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        stack, settings, init, train, hold = _prepare(args)
    except (ConfigError, OSError, ValueError, KeyError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        result = train_multistage(stack, train, settings, init=init,
                                  holdout=hold)
        tables.export_table(result.table, args.out)
        for entry in result.history:
            lo, hi = entry["window"]
            tail = entry["epoch_losses"][-1] if entry["epoch_losses"] else None
            line = f"stage {entry['stage']} layers {lo}..{hi}: " \
                   f"final train loss {tail}"
            if entry["holdout_loss"] is not None:
                line += f", holdout {entry['holdout_loss']:.6g}"
            print(line)
        if hold is not None and not result.aborted:
            hold_t = frames_to_tensors(hold)
            base = evaluate_loss(stack, hold_t, init,
                                 sharpness=settings.sharpness)
            trained = evaluate_loss(stack, hold_t, result.columns,
                                    sharpness=settings.sharpness)
            print(f"holdout loss: default {base:.6g} -> trained {trained:.6g}")
        if result.aborted:
            print(f"training aborted ({result.abort_reason}); wrote the last "
                  f"good checkpoint", file=sys.stderr)
        print(f"wrote {args.out}")
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
