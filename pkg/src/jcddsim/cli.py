"""Command-line front end.

Subcommands: simulate (BLER sweep from a config file), tune (offline
multistage parameter search), codegen (regular LDPC code to alist),
validate-table (schema and sign checks on a parameter table file), and
export-dataset (frame dumps for offline trainers).

Exit codes: 0 success, 2 config error (bad file, bad key, bad table, bad
receiver/channel combination), 3 runtime failure.
"""

import argparse
import sys

import numpy as np

from . import channel as ch
from . import harness
from . import jcdd_sparse as js
from . import tuner
from .gf2code import (Encoder, build_parity_polytope, generate_regular_code,
                      write_alist)


def _parser():
    p = argparse.ArgumentParser(prog="jcddsim")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a BLER sweep")
    sim.add_argument("--config", required=True)
    sim.add_argument("--receiver", help="comma list, overrides the config")
    sim.add_argument("--snr", help="comma list of dB values, overrides")
    sim.add_argument("--target-errors", type=int)
    sim.add_argument("--max-frames", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--params", help="parameter table for the jcdd receiver")
    sim.add_argument("--out", help="result path (stdout when omitted)")
    sim.add_argument("--format", choices=("csv", "json"), default="csv")
    sim.add_argument("--workers", type=int)

    tune = sub.add_parser("tune", help="multistage parameter search")
    tune.add_argument("--config", required=True)
    tune.add_argument("--snr", help="training SNR in dB (default: first grid point)")
    tune.add_argument("--seed", type=int)
    tune.add_argument("--out", required=True)
    tune.add_argument("--frames", type=int, default=64)
    tune.add_argument("--layers", type=int, default=10, help="table depth")
    tune.add_argument("--stage", type=int, default=5, help="layers per stage")
    tune.add_argument("--samples", type=int, default=16)
    tune.add_argument("--budget", type=int, default=40,
                      help="search steps per stage")

    gen = sub.add_parser("codegen", help="draw a regular LDPC code")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--d-v", type=int, required=True)
    gen.add_argument("--d-c", type=int, required=True)
    gen.add_argument("--seed", type=int, default=1)
    gen.add_argument("--out", required=True)

    val = sub.add_parser("validate-table", help="check a parameter table file")
    val.add_argument("--params", required=True)

    exp = sub.add_parser("export-dataset", help="dump frames for offline training")
    exp.add_argument("--config", required=True)
    exp.add_argument("--snr", type=float, required=True)
    exp.add_argument("--frames", type=int, required=True)
    exp.add_argument("--seed", type=int)
    exp.add_argument("--out", required=True)
    return p


def _apply_overrides(raw, args):
    if args.receiver is not None:
        raw["receivers"] = args.receiver
    if args.snr is not None:
        raw["snr_db"] = args.snr
    if args.target_errors is not None:
        raw["stop.target_errors"] = str(args.target_errors)
    if args.max_frames is not None:
        raw["stop.max_frames"] = str(args.max_frames)
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    if getattr(args, "workers", None) is not None:
        raw["sim.workers"] = str(args.workers)
    if args.params is not None:
        jcdd = [r for r in raw.get("receivers", "").replace(",", " ").split()
                if r in ("jcdd-g", "jcdd-s")]
        if len(jcdd) != 1:
            raise ValueError(
                "--params needs exactly one jcdd receiver in the run")
        raw[f"tables.{jcdd[0]}"] = args.params
    return raw


class ConfigError(Exception):
    pass


def _config_phase(fn):
    """Run fn, converting input-validation failures into ConfigError."""
    try:
        return fn()
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(err) from None


def _cmd_simulate(args):
    def prepare():
        raw = _apply_overrides(harness.parse_config_text(
            open(args.config).read()), args)
        config = harness.config_from_dict(raw)
        harness.build_receivers(config)  # surface pairing/table errors here
        return config

    config = _config_phase(prepare)
    result = harness.run_sweep(config)
    if args.out:
        harness.write_results(result, args.out, fmt=args.format)
    else:
        text = harness.format_csv(result) if args.format == "csv" \
            else harness.format_json(result)
        sys.stdout.write(text)
    for flag in result.flags:
        print(f"warning: {flag}", file=sys.stderr)
    return 0


def _cmd_tune(args):
    def prepare():
        raw = harness.parse_config_text(open(args.config).read())
        if args.seed is not None:
            raw["seed"] = str(args.seed)
        config = harness.config_from_dict(raw)
        code = harness.load_code(config.code_spec)
        poly = build_parity_polytope(code)
        spec = harness._spec_for(config.frame)
        model = config.model
        if isinstance(model, ch.SalehValenzuelaChannel):
            f_t = ch.beamspace_dft(*model.tx_grid)
            f_r = ch.beamspace_dft(*model.rx_grid)
            pilots = ch.generate_pilots(config.frame.n_t, config.frame.t_p)
            handle = tuner.sparse_handle(
                code, poly, f_r, f_t, spec,
                tau_anchor=js.default_tau(pilots, f_t))
        else:
            prior = model.var_g if isinstance(model, ch.IidChannel) \
                else ch.channel_covariance(model)
            handle = tuner.gaussian_handle(code, poly, prior, spec)
        snr = float(args.snr) if args.snr is not None else config.snr_db[0]
        return config, code, spec, model, handle, snr

    config, code, spec, model, handle, snr = _config_phase(prepare)
    sigma2 = 10.0 ** (-snr / 10.0)
    enc = Encoder(code)
    frames = []
    for idx in range(args.frames):
        rng = np.random.default_rng(harness.mix_seed(config.seed, idx))
        frames.append(ch.make_frame(config.frame, model, [enc], sigma2,
                                    spec, rng))
    cut = max(1, args.frames - args.frames // 4)  # last quarter held out
    tcfg = tuner.TrainerConfig(l_part=args.stage, l_max=args.layers,
                               samples=args.samples, budget=args.budget,
                               seed=config.seed, train_snr_db=snr)
    table = tuner.tune_multistage(handle, frames[:cut], tcfg,
                                  holdout=frames[cut:] or None)
    tuner.export_table(table, args.out)
    print(f"wrote {args.out} (provenance: {table.provenance})")
    return 0


def _cmd_codegen(args):
    def run():
        code = generate_regular_code(args.n, args.d_v, args.d_c,
                                     seed=args.seed)
        write_alist(code, args.out)
        return code

    code = _config_phase(run)
    print(f"wrote {args.out} ({code.m}x{code.n})")
    return 0


def _cmd_validate_table(args):
    table = _config_phase(lambda: tuner.import_table(args.params))
    print(f"{args.params}: network {table.network}, {table.l_max} layer(s), "
          f"provenance {table.provenance}")
    return 0


def _cmd_export_dataset(args):
    def prepare():
        raw = harness.parse_config_text(open(args.config).read())
        if args.seed is not None:
            raw["seed"] = str(args.seed)
        return harness.config_from_dict(raw)

    config = _config_phase(prepare)
    harness.export_dataset(config, args.out, snr_db=args.snr,
                           n_frames=args.frames)
    print(f"wrote {args.out} ({args.frames} frames at {args.snr} dB)")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "tune": _cmd_tune,
    "codegen": _cmd_codegen,
    "validate-table": _cmd_validate_table,
    "export-dataset": _cmd_export_dataset,
}


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # anything past input validation
        print(f"runtime failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
