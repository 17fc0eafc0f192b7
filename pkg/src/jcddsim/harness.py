"""Monte-Carlo BLER simulation driver behind the command-line interface.

Config files are flat ``key = value`` text with dotted key names and ``#``
comments; every key is documented in the README and unknown keys are
rejected. SNR maps to noise power as sigma2 = 10^(-snr_db/10) (unit-energy
constellations, unit-variance channel entries).

Seed discipline: frame k is drawn from default_rng(mix_seed(seed, k)), a
splitmix64 mix of the base seed and the frame index, so every receiver at a
given SNR scores the identical frame sequence (paired comparison) and runs
reproduce across machines and worker counts. A receiver stops accumulating
once it reaches the target error count; its tally then covers a prefix of
the shared sequence. Block errors count any information-bit mismatch.
"""

import csv
import hashlib
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import channel as ch
from . import jcdd_gaussian as jg
from . import jcdd_sparse as js
from . import tuner
from .gf2code import Encoder, build_parity_polytope, generate_regular_code, load_alist
from .modem import constellation

CSV_COLUMNS = ("receiver", "snr_db", "sigma2", "frames", "block_errors",
               "bler", "avg_iters", "avg_ms")

_MASK64 = (1 << 64) - 1

_BASELINE_IDS = {
    "decoupled-mmse": ("decoupled", "mmse", False),
    "decoupled-map": ("decoupled", "map", False),
    "decoupled-mmse-genie": ("decoupled", "mmse", True),
    "decoupled-map-genie": ("decoupled", "map", True),
    "idd-mmse": ("idd", "mmse", False),
    "idd-map": ("idd", "map", False),
    "icdd-mmse": ("icdd", "mmse", False),
    "icdd-map": ("icdd", "map", False),
}
RECEIVER_IDS = tuple(sorted(_BASELINE_IDS)) + ("jcdd-g", "jcdd-s")


def mix_seed(base, index):
    """splitmix64 finalizer of (base XOR index).

    Matches the published splitmix64 sequence: mix_seed(0, 0) equals the
    generator's first output for seed 0, 0xE220A8397B1DCDAF.
    """
    x = ((int(base) ^ int(index)) + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def parse_config_text(text):
    """Flat key = value lines into a dict; comments and blanks skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, val = line.split("=", 1)
        key = key.strip()
        val = val.strip()
        if not key or not val:
            raise ValueError(f"config line {lineno}: empty key or value")
        if key in out:
            raise ValueError(f"config line {lineno}: duplicate key '{key}'")
        out[key] = val
    return out


def _as_int(val, key):
    try:
        return int(str(val).strip())
    except ValueError:
        raise ValueError(f"config key '{key}' must be an integer, got '{val}'") from None


def _as_float(val, key):
    try:
        return float(str(val).strip())
    except ValueError:
        raise ValueError(f"config key '{key}' must be a number, got '{val}'") from None


def _as_grid(val, key):
    parts = str(val).lower().replace("x", " ").split()
    if len(parts) != 2:
        raise ValueError(f"config key '{key}' must look like '2x4', got '{val}'")
    return (_as_int(parts[0], key), _as_int(parts[1], key))


@dataclass(frozen=True)
class SimConfig:
    """Typed view of one simulation configuration plus the raw echo."""

    frame: ch.FrameConfig
    model: object
    code_spec: tuple
    receivers: tuple
    snr_db: tuple
    target_errors: int = 100
    max_frames: int = 10000
    seed: int = 0
    tables: dict = field(default_factory=dict)
    turbo: bl.TurboConfig = field(default_factory=bl.TurboConfig)
    max_iter_g: int = 100
    max_iter_s: int = 100
    workers: int = 1
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.snr_db:
            raise ValueError("snr_db grid must be non-empty")
        if self.target_errors < 1 or self.max_frames < 1:
            raise ValueError("stop rule must be positive")
        if self.workers < 1:
            raise ValueError("sim.workers must be >= 1")


def config_from_dict(raw):
    """Validate a flat key/value dict into a SimConfig; unknown keys error."""
    work = dict(raw)

    def take(key, default=None, required=False):
        if key in work:
            return work.pop(key)
        if required:
            raise ValueError(f"missing config key '{key}'")
        return default

    frame = ch.FrameConfig(
        n_t=_as_int(take("frame.n_t", required=True), "frame.n_t"),
        n_r=_as_int(take("frame.n_r", required=True), "frame.n_r"),
        t_p=_as_int(take("frame.t_p", required=True), "frame.t_p"),
        q=_as_int(take("frame.q", required=True), "frame.q"),
    )

    kind = str(take("channel.model", required=True)).lower()
    if kind == "iid":
        model = ch.IidChannel(
            n_r=frame.n_r, n_t=frame.n_t,
            var_g=_as_float(take("channel.var_g", 1.0), "channel.var_g"))
    elif kind == "kronecker":
        rho_t = _as_float(take("channel.rho_t", required=True), "channel.rho_t")
        rho_r = _as_float(take("channel.rho_r", required=True), "channel.rho_r")
        model = ch.KroneckerChannel(r_r=ch.exp_correlation(frame.n_r, rho_r),
                                    r_t=ch.exp_correlation(frame.n_t, rho_t))
    elif kind == "sv":
        model = ch.SalehValenzuelaChannel(
            n_cl=_as_int(take("channel.n_cl", required=True), "channel.n_cl"),
            n_p=_as_int(take("channel.n_p", required=True), "channel.n_p"),
            tx_grid=_as_grid(take("channel.tx_grid", required=True), "channel.tx_grid"),
            rx_grid=_as_grid(take("channel.rx_grid", required=True), "channel.rx_grid"),
            spread_deg=_as_float(take("channel.spread_deg", 7.5), "channel.spread_deg"))
        if model.n_t != frame.n_t or model.n_r != frame.n_r:
            raise ValueError(
                f"channel grids {model.n_t}x{model.n_r} disagree with frame "
                f"antennas {frame.n_t}x{frame.n_r}")
    else:
        raise ValueError(f"unknown channel.model '{kind}'")

    alist = take("code.alist")
    if alist is not None:
        for key in ("code.n", "code.d_v", "code.d_c", "code.seed"):
            if key in work:
                raise ValueError("give either code.alist or a generator spec, not both")
        code_spec = ("alist", str(alist))
    else:
        code_spec = ("generated",
                     _as_int(take("code.n", required=True), "code.n"),
                     _as_int(take("code.d_v", required=True), "code.d_v"),
                     _as_int(take("code.d_c", required=True), "code.d_c"),
                     _as_int(take("code.seed", 1), "code.seed"))

    receivers = tuple(p.strip() for p in str(take("receivers", required=True)).split(",") if p.strip())
    if not receivers:
        raise ValueError("receivers list is empty")
    for name in receivers:
        if name not in RECEIVER_IDS:
            raise ValueError(f"unknown receiver '{name}'; known: {', '.join(RECEIVER_IDS)}")
    if len(set(receivers)) != len(receivers):
        raise ValueError("duplicate receiver ids")

    snr = tuple(_as_float(p, "snr_db") for p in str(take("snr_db", required=True)).split(","))

    tables = {}
    for key in [k for k in work if k.startswith("tables.")]:
        name = key[len("tables."):]
        if name not in ("jcdd-g", "jcdd-s"):
            raise ValueError(f"receiver '{name}' does not take a parameter table")
        tables[name] = str(work.pop(key))

    turbo = bl.TurboConfig(
        max_turbo=_as_int(take("turbo.max_turbo", 10), "turbo.max_turbo"),
        max_bp=_as_int(take("turbo.max_bp", 100), "turbo.max_bp"),
        max_ista=_as_int(take("turbo.max_ista", 100), "turbo.max_ista"))

    cfg = SimConfig(
        frame=frame, model=model, code_spec=code_spec, receivers=receivers,
        snr_db=snr,
        target_errors=_as_int(take("stop.target_errors", 100), "stop.target_errors"),
        max_frames=_as_int(take("stop.max_frames", 10000), "stop.max_frames"),
        seed=_as_int(take("seed", 0), "seed"),
        tables=tables, turbo=turbo,
        max_iter_g=_as_int(take("jcdd.max_iter_g", 100), "jcdd.max_iter_g"),
        max_iter_s=_as_int(take("jcdd.max_iter_s", 100), "jcdd.max_iter_s"),
        workers=_as_int(take("sim.workers", 1), "sim.workers"),
        raw=dict(raw))
    if work:
        raise ValueError(f"unknown config key(s): {', '.join(sorted(work))}")
    return cfg


def load_config(path):
    return config_from_dict(parse_config_text(Path(path).read_text()))


def load_code(code_spec):
    if code_spec[0] == "alist":
        return load_alist(code_spec[1])
    _, n, d_v, d_c, seed = code_spec
    return generate_regular_code(n, d_v, d_c, seed=seed)


def _spec_for(frame):
    return constellation({2: "qpsk", 4: "16qam"}[frame.q])


@dataclass
class _Bundle:
    code: object
    enc: object
    spec: object
    runners: dict
    info_cols: np.ndarray


def build_receivers(config):
    """Resolve the configured receiver ids into per-frame callables.

    Channel-estimator flavors follow the channel model: Gaussian models use
    the LMMSE pilot estimator and the dense prior, Saleh-Valenzuela models
    use the beamspace ISTA estimator. Mismatched solver/channel pairings and
    oversized MAP enumerations are config errors.
    """
    code = load_code(config.code_spec)
    poly = None
    enc = Encoder(code)
    spec = _spec_for(config.frame)
    frame_cfg = config.frame
    model = config.model
    sparse = isinstance(model, ch.SalehValenzuelaChannel)
    if sparse:
        f_t = ch.beamspace_dft(*model.tx_grid)
        f_r = ch.beamspace_dft(*model.rx_grid)
        prior = None
    else:
        f_t = f_r = None
        prior = model.var_g if isinstance(model, ch.IidChannel) \
            else ch.channel_covariance(model)

    def load_table(name, network, depth, extra=None):
        table = tuner.import_table(config.tables[name])
        if table.network != network:
            raise ValueError(
                f"parameter table network '{table.network}' does not fit "
                f"receiver '{name}'")
        # layers beyond the trained depth fall back to the defaults
        return tuner.to_layer_params(table, layers=depth, defaults=extra)

    runners = {}
    for name in config.receivers:
        if name == "jcdd-g":
            if sparse:
                raise ValueError(
                    "receiver 'jcdd-g' needs a Gaussian channel prior; use "
                    "'jcdd-s' on Saleh-Valenzuela channels")
            poly = build_parity_polytope(code) if poly is None else poly
            params = None
            if name in config.tables:
                params = load_table(name, "jcddnet-g", config.max_iter_g)

            def run_g(fr, p=params, poly=poly):
                return jg.solve(fr.y, fr.s_p, code, poly, prior, fr.sigma2,
                                spec, params=p, max_iter=config.max_iter_g)

            runners[name] = run_g
        elif name == "jcdd-s":
            if not sparse:
                raise ValueError(
                    "receiver 'jcdd-s' needs a Saleh-Valenzuela channel; use "
                    "'jcdd-g' on Gaussian channels")
            poly = build_parity_polytope(code) if poly is None else poly
            # pilots are deterministic per config, so the stepsize anchor is too
            pilots = ch.generate_pilots(frame_cfg.n_t, frame_cfg.t_p)
            tau = js.DEFAULT_TAU_SCALE * js.default_tau(pilots, f_t)
            if name in config.tables:
                params = load_table(name, "jcddnet-s", config.max_iter_s,
                                    extra={"tau": tau})
            else:
                params = js.LayerParamsS.constant(tau=tau, layers=1)

            def run_s(fr, p=params, poly=poly):
                return js.solve(fr.y, fr.s_p, code, poly, f_r, f_t, fr.sigma2,
                                spec, params=p, max_iter=config.max_iter_s)

            runners[name] = run_s
        else:
            kind, det, genie = _BASELINE_IDS[name]
            if det == "map" and frame_cfg.n_streams * frame_cfg.q > 16:
                raise ValueError(
                    f"receiver '{name}': MAP enumeration over "
                    f"{frame_cfg.n_streams * frame_cfg.q} bits exceeds the "
                    "16-bit budget")
            if genie:
                flavor = bl.ReceiverFlavor(ce="genie", detector=det)
            elif sparse:
                flavor = bl.ReceiverFlavor(ce="ista", detector=det, f_r=f_r,
                                           f_t=f_t)
            else:
                flavor = bl.ReceiverFlavor(ce="lmmse", detector=det,
                                           prior=prior)
            runner = {"decoupled": bl.run_decoupled, "idd": bl.run_idd,
                      "icdd": bl.run_icdd}[kind]

            def run_b(fr, r=runner, f=flavor):
                return r(fr, code, f, spec, config.turbo)

            runners[name] = run_b
    return _Bundle(code=code, enc=enc, spec=spec, runners=runners,
                   info_cols=enc.info_cols)


def _frame_digest(frame):
    h = hashlib.sha256()
    for arr in (frame.y, frame.s_p, frame.bits):
        h.update(np.ascontiguousarray(arr).tobytes())
    return int.from_bytes(h.digest()[:8], "big")


def _run_block(config, bundle, sigma2, indices):
    """Per-frame outcomes for one index block: {name: [(err, iters, ms)]}."""
    out = {name: [] for name in bundle.runners}
    digests = []
    for idx in indices:
        rng = np.random.default_rng(mix_seed(config.seed, idx))
        frame = ch.make_frame(config.frame, config.model, [bundle.enc],
                              sigma2, bundle.spec, rng)
        digests.append(_frame_digest(frame))
        for name, run in bundle.runners.items():
            t0 = time.perf_counter()
            res = run(frame)
            ms = 1000.0 * (time.perf_counter() - t0)
            err = bool(np.any(res.bits[bundle.info_cols]
                              != frame.info_bits[0]))
            out[name].append((err, res.iterations, ms))
    return out, digests


_WORKER_STATE = {}


def _worker_block(raw, sigma2, indices):
    key = json.dumps(raw, sort_keys=True)
    if _WORKER_STATE.get("key") != key:
        cfg = config_from_dict(raw)
        _WORKER_STATE.update(key=key, config=cfg, bundle=build_receivers(cfg))
    return _run_block(_WORKER_STATE["config"], _WORKER_STATE["bundle"],
                      sigma2, indices)


@dataclass
class SimResult:
    """Sweep outcome: one row per (receiver, SNR) plus reproducibility data."""

    rows: list
    config: dict
    seed: int
    checksums: dict
    flags: list = field(default_factory=list)
    frame_errors: dict = field(default_factory=dict)


def run_sweep(config, *, record_frames=False):
    """Run the configured receivers over the SNR grid with paired frames.

    Frames stream in blocks; block results merge in index order and the stop
    rule is applied per frame, so error counts are identical for any worker
    count. record_frames keeps the per-frame error sequence of every
    (receiver, SNR) cell for paired significance tests.
    """
    bundle = build_receivers(config)
    if config.workers > 1 and not config.raw:
        raise ValueError("sim.workers > 1 needs a config built from "
                         "key/value form (workers rebuild it)")
    names = list(bundle.runners)
    block = 32 if config.workers > 1 else min(32, config.max_frames)
    rows = []
    checksums = {}
    frame_errors = {}
    pool = ProcessPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for snr in config.snr_db:
            sigma2 = 10.0 ** (-snr / 10.0)
            tally = {n: {"frames": 0, "errors": 0, "iters": 0, "ms": 0.0}
                     for n in names}
            recorded = {n: [] for n in names}
            active = set(names)
            digests = []
            start = 0
            pending = []
            while active or pending:
                if pool is not None:
                    while active and start < config.max_frames \
                            and len(pending) <= config.workers:
                        idx = list(range(start, min(start + block,
                                                    config.max_frames)))
                        pending.append(pool.submit(_worker_block, config.raw,
                                                   sigma2, idx))
                        start += block
                    if not pending:
                        break
                    block_out, block_digests = pending.pop(0).result()
                else:
                    if not active or start >= config.max_frames:
                        break
                    idx = list(range(start, min(start + block,
                                                config.max_frames)))
                    start += block
                    block_out, block_digests = _run_block(config, bundle,
                                                          sigma2, idx)
                digests.extend(block_digests)
                for name in names:
                    t = tally[name]
                    for err, iters, ms in block_out[name]:
                        if t["errors"] >= config.target_errors:
                            break
                        t["frames"] += 1
                        t["errors"] += int(err)
                        t["iters"] += iters
                        t["ms"] += ms
                        recorded[name].append(bool(err))
                    if t["errors"] >= config.target_errors:
                        active.discard(name)
            for name in names:
                t = tally[name]
                frames = max(t["frames"], 1)
                rows.append({
                    "receiver": name, "snr_db": snr, "sigma2": sigma2,
                    "frames": t["frames"], "block_errors": t["errors"],
                    "bler": t["errors"] / frames,
                    "avg_iters": t["iters"] / frames,
                    "avg_ms": t["ms"] / frames,
                })
                if record_frames:
                    frame_errors[(name, snr)] = recorded[name]
            # checksum covers the frames any receiver consumed, so the value
            # is independent of worker count and block size
            used = max(tally[n]["frames"] for n in names)
            digest = 0
            for d in digests[:used]:
                digest ^= d
            checksums[str(snr)] = f"{digest:016x}"
    finally:
        if pool is not None:
            pool.shutdown()
    flags = _monotone_flags(rows, config)
    return SimResult(rows=rows, config=dict(config.raw), seed=config.seed,
                     checksums=checksums, flags=flags,
                     frame_errors=frame_errors)


def _monotone_flags(rows, config):
    """Advisory check: BLER at the top of the SNR grid should not exceed the
    bottom. Statistical, so it flags rather than fails."""
    if len(config.snr_db) < 2:
        return []
    lo = min(config.snr_db)
    hi = max(config.snr_db)
    flags = []
    for name in config.receivers:
        pick = {r["snr_db"]: r for r in rows if r["receiver"] == name}
        r_lo, r_hi = pick[lo], pick[hi]
        if r_hi["bler"] > r_lo["bler"]:
            note = "" if min(r_lo["frames"], r_hi["frames"]) >= 2000 \
                else " (small run)"
            flags.append(
                f"receiver '{name}': BLER {r_hi['bler']:.6g} at {hi:g} dB > "
                f"{r_lo['bler']:.6g} at {lo:g} dB{note}")
    return flags


def format_csv(result):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in result.rows:
        writer.writerow([row["receiver"]] + [repr(row[c]) if isinstance(row[c], float)
                                             else row[c] for c in CSV_COLUMNS[1:]])
    return buf.getvalue()


def format_json(result):
    payload = {
        "config": result.config,
        "seed": result.seed,
        "checksums": result.checksums,
        "flags": result.flags,
        "rows": result.rows,
    }
    return json.dumps(payload, indent=2) + "\n"


def write_results(result, path, fmt="csv"):
    """Write a sweep result as CSV (fixed column order) or its JSON mirror."""
    if fmt == "csv":
        text = format_csv(result)
    elif fmt == "json":
        text = format_json(result)
    else:
        raise ValueError(f"unknown output format '{fmt}'")
    Path(path).write_text(text)


def export_dataset(config, path, *, snr_db, n_frames):
    """Text dataset for offline trainers: one record per frame.

    Record fields: sigma2, Y and S_P as real/imag rows (row-major, repr
    precision), and the transmitted code bits. The header carries the
    dimensions needed to unflatten. Frames reuse the harness seed discipline
    so a dataset is reproducible from (config, snr_db, n_frames) alone.
    """
    bundle = build_receivers(config)
    sigma2 = 10.0 ** (-snr_db / 10.0)
    t_d = config.frame.data_slots(bundle.code.n)
    lines = [
        "# jcddsim frame dataset v1",
        f"# n_r={config.frame.n_r} n_t={config.frame.n_t} "
        f"t_p={config.frame.t_p} t_d={t_d} q={config.frame.q} "
        f"n={bundle.code.n} snr_db={snr_db!r} seed={config.seed}",
    ]
    for idx in range(n_frames):
        rng = np.random.default_rng(mix_seed(config.seed, idx))
        frame = ch.make_frame(config.frame, config.model, [bundle.enc],
                              sigma2, bundle.spec, rng)
        lines.append(f"record {idx}")
        lines.append(f"sigma2 {frame.sigma2!r}")
        for label, arr in (("y", frame.y), ("s_p", frame.s_p)):
            lines.append(f"{label}.real " + " ".join(repr(float(v)) for v in arr.real.ravel()))
            lines.append(f"{label}.imag " + " ".join(repr(float(v)) for v in arr.imag.ravel()))
        lines.append("bits " + " ".join(str(int(b)) for b in frame.bits))
        lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path):
    """Parse a dataset written by export_dataset into (meta, records)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "# jcddsim frame dataset v1":
        raise ValueError("not a jcddsim frame dataset")
    meta = {}
    for part in lines[1].lstrip("# ").split():
        key, val = part.split("=", 1)
        meta[key] = float(val) if "." in val or "e" in val else int(val)
    records = []
    cur = None
    for line in lines[2:]:
        if line.startswith("record "):
            cur = {}
        elif line == "end":
            n_r, t_p = int(meta["n_r"]), int(meta["t_p"])
            t = t_p + int(meta["t_d"])
            n_t = int(meta["n_t"])
            records.append({
                "sigma2": cur["sigma2"],
                "y": (cur["y.real"] + 1j * cur["y.imag"]).reshape(n_r, t),
                "s_p": (cur["s_p.real"] + 1j * cur["s_p.imag"]).reshape(n_t, t_p),
                "bits": cur["bits"].astype(np.uint8),
            })
            cur = None
        elif cur is not None:
            key, rest = line.split(" ", 1)
            vals = np.array([float(v) for v in rest.split()])
            cur[key] = vals[0] if key == "sigma2" else vals
    return meta, records
