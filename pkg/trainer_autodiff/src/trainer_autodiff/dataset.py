"""Reader for the simulator's frame-dataset text format.

Format v1: header line '# jcddsim frame dataset v1', a '# key=value ...'
dimension line, then per frame a 'record <idx>' block holding sigma2, Y and
S_P split into real/imag rows (row-major floats) and the transmitted code
bits, closed by 'end'. Everything is plain text so the trainer shares no
code with the producer.
"""

from pathlib import Path

import numpy as np

MAGIC = "# jcddsim frame dataset v1"


def load_dataset(path):
    """Parse a dataset file into (meta, records).

    meta carries the header dimensions (n_r, n_t, t_p, t_d, q, n, snr_db,
    seed); each record is a dict with complex y (n_r x t_p+t_d), complex
    s_p (n_t x t_p), float sigma2 and uint8 bits (n,).
    """
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError("not a jcddsim frame dataset")
    if len(lines) < 2 or not lines[1].startswith("#"):
        raise ValueError("missing dataset dimension header")
    meta = {}
    for part in lines[1].lstrip("# ").split():
        key, val = part.split("=", 1)
        meta[key] = float(val) if "." in val or "e" in val else int(val)
    for key in ("n_r", "n_t", "t_p", "t_d", "q", "n"):
        if key not in meta:
            raise ValueError(f"dataset header missing '{key}'")
    n_r, n_t = int(meta["n_r"]), int(meta["n_t"])
    t_p, t = int(meta["t_p"]), int(meta["t_p"]) + int(meta["t_d"])

    records = []
    cur = None
    for lineno, line in enumerate(lines[2:], start=3):
        if line.startswith("record "):
            if cur is not None:
                raise ValueError(f"line {lineno}: record opened inside a record")
            cur = {}
        elif line == "end":
            if cur is None:
                raise ValueError(f"line {lineno}: 'end' outside a record")
            missing = [k for k in ("sigma2", "y.real", "y.imag", "s_p.real",
                                   "s_p.imag", "bits") if k not in cur]
            if missing:
                raise ValueError(f"line {lineno}: record missing {missing}")
            sizes = {"y.real": n_r * t, "y.imag": n_r * t,
                     "s_p.real": n_t * t_p, "s_p.imag": n_t * t_p}
            for key, want in sizes.items():
                if cur[key].size != want:
                    raise ValueError(
                        f"line {lineno}: field sizes disagree with header")
            y = (cur["y.real"] + 1j * cur["y.imag"])
            s_p = (cur["s_p.real"] + 1j * cur["s_p.imag"])
            bits = cur["bits"]
            if bits.size != int(meta["n"]):
                raise ValueError(f"line {lineno}: expected {meta['n']} bits")
            records.append({
                "sigma2": float(cur["sigma2"]),
                "y": y.reshape(n_r, t),
                "s_p": s_p.reshape(n_t, t_p),
                "bits": bits.astype(np.uint8),
            })
            cur = None
        elif cur is not None and line.strip():
            key, _, rest = line.partition(" ")
            vals = np.array([float(v) for v in rest.split()])
            cur[key] = vals[0] if key == "sigma2" else vals
    if cur is not None:
        raise ValueError("dataset ends inside a record")
    if not records:
        raise ValueError("dataset holds no records")
    return meta, records


def common_sigma2(records):
    """The shared noise variance of a single-SNR dataset."""
    vals = {rec["sigma2"] for rec in records}
    if len(vals) != 1:
        raise ValueError(f"records carry {len(vals)} distinct sigma2 values")
    return vals.pop()
