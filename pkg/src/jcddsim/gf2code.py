"""Binary LDPC code layer: parity-check matrices, encoding, polytope, BP.

Public surface:
    ParityCheckMatrix      sparse binary matrix as per-check column tuples
    load_alist / write_alist
    generate_regular_code  seeded (d_v, d_c)-regular construction, girth >= 6
    Encoder                GF(2) systematic-by-permutation encoder
    syndrome / syndrome_ok
    ParityPolytope / build_parity_polytope
    bp_decode / bp_decode_soft
    stack_parity_checks    block-diagonal stacking for multiuser receivers

All bit vectors are numpy arrays with values in {0, 1}.  Indices are
0-based internally; the alist format on disk is 1-based.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

# BP internals clamp LLR magnitudes here; keeps tanh/atanh away from
# saturation while staying far above any information-bearing value.
_BP_LLR_CLIP = 40.0
_BP_MAG_FLOOR = 1e-12


@dataclass(frozen=True)
class ParityCheckMatrix:
    """Binary parity-check matrix stored as sorted column tuples per row."""

    m: int
    n: int
    rows: tuple

    def __post_init__(self):
        if self.m <= 0 or self.n <= 0:
            raise ValueError(f"need positive dimensions, got {self.m}x{self.n}")
        if len(self.rows) != self.m:
            raise ValueError(f"expected {self.m} rows, got {len(self.rows)}")
        for j, cols in enumerate(self.rows):
            if len(cols) == 0:
                raise ValueError(f"row {j} has degree 0")
            if len(set(cols)) != len(cols):
                raise ValueError(f"row {j} lists a column twice")
            if tuple(sorted(cols)) != tuple(cols):
                raise ValueError(f"row {j} columns not sorted")
            if cols[0] < 0 or cols[-1] >= self.n:
                raise ValueError(f"row {j} has column index out of [0, {self.n})")

    @property
    def row_degrees(self):
        return np.array([len(cols) for cols in self.rows])

    @property
    def col_degrees(self):
        deg = np.zeros(self.n, dtype=np.int64)
        for cols in self.rows:
            for i in cols:
                deg[i] += 1
        return deg

    def to_dense(self):
        h = np.zeros((self.m, self.n), dtype=np.uint8)
        for j, cols in enumerate(self.rows):
            h[j, list(cols)] = 1
        return h


def matrix_from_dense(dense):
    dense = np.asarray(dense)
    rows = tuple(tuple(int(i) for i in np.flatnonzero(r)) for r in dense)
    return ParityCheckMatrix(dense.shape[0], dense.shape[1], rows)


def stack_parity_checks(codes):
    """Block-diagonal stack of several codes (rows then columns offset)."""
    rows = []
    col_off = 0
    for h in codes:
        for cols in h.rows:
            rows.append(tuple(i + col_off for i in cols))
        col_off += h.n
    return ParityCheckMatrix(sum(h.m for h in codes), col_off, tuple(rows))


# ---------------------------------------------------------------------------
# alist IO


def parse_alist(text):
    """Parse alist text into a ParityCheckMatrix.

    Raises ValueError with the offending 1-based line number on malformed
    counts, out-of-range indices or duplicated positions.
    """
    lines = text.splitlines()

    def ints(lineno):
        if lineno > len(lines):
            raise ValueError(f"alist truncated: expected data on line {lineno}")
        try:
            return [int(t) for t in lines[lineno - 1].split()]
        except ValueError:
            raise ValueError(f"line {lineno}: non-integer token") from None

    head = ints(1)
    if len(head) != 2:
        raise ValueError("line 1: expected 'N M'")
    n, m = head
    if n <= 0 or m <= 0:
        raise ValueError(f"line 1: dimensions must be positive, got {n} {m}")
    maxdeg = ints(2)
    if len(maxdeg) != 2:
        raise ValueError("line 2: expected max column and row degree")
    col_deg = ints(3)
    if len(col_deg) != n:
        raise ValueError(f"line 3: expected {n} column degrees, got {len(col_deg)}")
    row_deg = ints(4)
    if len(row_deg) != m:
        raise ValueError(f"line 4: expected {m} row degrees, got {len(row_deg)}")

    def neighbor_list(lineno, degree, limit, what):
        toks = ints(lineno)
        vals = [t for t in toks if t != 0]
        if len(vals) != degree:
            raise ValueError(
                f"line {lineno}: expected {degree} nonzero {what} indices, got {len(vals)}"
            )
        for v in vals:
            if not 1 <= v <= limit:
                raise ValueError(f"line {lineno}: index {v} out of range 1..{limit}")
        if len(set(vals)) != degree:
            raise ValueError(f"line {lineno}: duplicate position")
        return vals

    col_lists = [neighbor_list(5 + i, col_deg[i], m, "check") for i in range(n)]
    row_lists = [neighbor_list(5 + n + j, row_deg[j], n, "column") for j in range(m)]

    # row and column lists describe the same matrix; disagreement means the
    # file is corrupt
    from_cols = set()
    for i, checks in enumerate(col_lists):
        for j in checks:
            from_cols.add((j - 1, i))
    from_rows = set()
    for j, cols in enumerate(row_lists):
        for i in cols:
            from_rows.add((j, i - 1))
    if from_cols != from_rows:
        raise ValueError("column lists and row lists disagree")

    rows = tuple(tuple(sorted(i - 1 for i in cols)) for cols in row_lists)
    return ParityCheckMatrix(m, n, rows)


def load_alist(path):
    with open(path) as f:
        return parse_alist(f.read())


def format_alist(h):
    col_deg = h.col_degrees
    row_deg = h.row_degrees
    max_dv = int(col_deg.max())
    max_dc = int(row_deg.max())
    cols_of = [[] for _ in range(h.n)]
    for j, cols in enumerate(h.rows):
        for i in cols:
            cols_of[i].append(j + 1)

    def padded(vals, width):
        vals = list(vals) + [0] * (width - len(vals))
        return " ".join(str(v) for v in vals)

    out = [f"{h.n} {h.m}", f"{max_dv} {max_dc}"]
    out.append(" ".join(str(int(d)) for d in col_deg))
    out.append(" ".join(str(int(d)) for d in row_deg))
    out.extend(padded(cols_of[i], max_dv) for i in range(h.n))
    out.extend(padded([i + 1 for i in h.rows[j]], max_dc) for j in range(h.m))
    return "\n".join(out) + "\n"


def write_alist(h, path):
    with open(path, "w") as f:
        f.write(format_alist(h))


# ---------------------------------------------------------------------------
# regular code construction


def generate_regular_code(n, d_v, d_c, seed, max_repair=None):
    """Seeded (d_v, d_c)-regular parity-check matrix, 4-cycle-free when possible.

    Pairs variable and check sockets through a random permutation, then
    repairs by random edge swaps: parallel edges must be removed (error if
    the budget runs out), length-4 cycles are removed on a best-effort
    basis within the same budget.  Small dense graphs where 4-cycles are
    unavoidable (e.g. 6 degree-6 checks on 12 variables) still yield a
    regular simple matrix.  Deterministic for a fixed seed.
    """
    if n <= 0 or d_v <= 0 or d_c <= 0:
        raise ValueError("n, d_v, d_c must be positive")
    if (n * d_v) % d_c != 0:
        raise ValueError(f"n*d_v = {n * d_v} not divisible by d_c = {d_c}")
    m = n * d_v // d_c
    if d_c > m or d_v > m:
        raise ValueError("degrees exceed matrix dimensions")
    n_edges = n * d_v
    if max_repair is None:
        max_repair = 50 * n_edges

    rng = np.random.default_rng(seed)
    edge_var = np.repeat(np.arange(n), d_v)
    edge_chk = rng.permutation(np.repeat(np.arange(m), d_c))

    for _ in range(max_repair):
        bad = _parallel_edges(edge_var, edge_chk, m)
        if bad.size == 0:
            break
        e = int(bad[rng.integers(bad.size)])
        partner = int(rng.integers(n_edges))
        edge_chk[e], edge_chk[partner] = edge_chk[partner], edge_chk[e]
    else:
        raise RuntimeError(
            f"could not remove parallel edges for n={n}, d_v={d_v}, d_c={d_c}, "
            f"seed={seed} within {max_repair} swaps"
        )

    _girth_repair(edge_var, edge_chk, m, rng, max_repair)

    rows = [[] for _ in range(m)]
    for v, c in zip(edge_var, edge_chk):
        rows[c].append(int(v))
    return ParityCheckMatrix(m, n, tuple(tuple(sorted(r)) for r in rows))


def _girth_repair(edge_var, edge_chk, m, rng, budget):
    """Greedy edge swaps removing variable pairs that meet in two checks.

    Keeps exact pair-multiplicity counts and only accepts swaps that do
    not increase the number of repeated pairs; occasional sideways moves
    escape plateaus.  Best effort: returns when clean or out of budget.
    """
    members = [set() for _ in range(m)]
    for v, c in zip(edge_var.tolist(), edge_chk.tolist()):
        members[c].add(v)
    paircount = {}
    for c in range(m):
        vs = sorted(members[c])
        for a in range(len(vs)):
            for b in range(a + 1, len(vs)):
                key = (vs[a], vs[b])
                paircount[key] = paircount.get(key, 0) + 1
    repeated = {k for k, cnt in paircount.items() if cnt > 1}

    def detach(v, c):
        delta = 0
        members[c].discard(v)
        for u in members[c]:
            key = (v, u) if v < u else (u, v)
            cnt = paircount[key] - 1
            paircount[key] = cnt
            if cnt == 1:
                repeated.discard(key)
                delta -= 1
            elif cnt >= 2:
                delta -= 1
        return delta

    def attach(v, c):
        delta = 0
        for u in members[c]:
            key = (v, u) if v < u else (u, v)
            cnt = paircount.get(key, 0) + 1
            paircount[key] = cnt
            if cnt == 2:
                repeated.add(key)
                delta += 1
            elif cnt > 2:
                delta += 1
        members[c].add(v)
        return delta

    n_edges = edge_var.shape[0]
    for _ in range(budget):
        if not repeated:
            return
        # one edge of a repeated pair: any incidence of either endpoint
        # whose check also contains the other endpoint
        v1, v2 = next(iter(repeated))
        e = next(
            ei
            for ei in np.flatnonzero(edge_var == v1)
            if v2 in members[edge_chk[ei]]
        )
        p = int(rng.integers(n_edges))
        ve, vp = int(edge_var[e]), int(edge_var[p])
        ce, cp = int(edge_chk[e]), int(edge_chk[p])
        if ce == cp or ve == vp:
            continue
        if ve in members[cp] or vp in members[ce]:
            continue  # would create a parallel edge
        delta = detach(ve, ce) + detach(vp, cp)
        delta += attach(ve, cp) + attach(vp, ce)
        if delta > 0 or (delta == 0 and rng.random() > 0.25):
            # roll back
            detach(ve, cp)
            detach(vp, ce)
            attach(ve, ce)
            attach(vp, cp)
            continue
        edge_chk[e], edge_chk[p] = cp, ce


def _parallel_edges(edge_var, edge_chk, m):
    """Edge indices duplicating an earlier (variable, check) incidence."""
    key = edge_var.astype(np.int64) * m + edge_chk
    order = np.argsort(key, kind="stable")
    dup = np.flatnonzero(np.diff(key[order]) == 0)
    return order[dup + 1]


# ---------------------------------------------------------------------------
# encoding


class Encoder:
    """Systematic encoder built from one GF(2) elimination of H.

    The elimination picks pivot columns left to right; codewords carry the
    information word on the non-pivot (free) columns and solved parity on
    the pivot columns.  Requires full row rank.
    """

    def __init__(self, h):
        self.h = h
        dense = h.to_dense()
        work = dense.astype(np.uint8)
        row_origin = np.arange(h.m)
        pivot_cols = []
        r = 0
        for c in range(h.n):
            if r == h.m:
                break
            hit = np.flatnonzero(work[r:, c]) + r
            if hit.size == 0:
                continue
            p = hit[0]
            if p != r:
                work[[r, p]] = work[[p, r]]
                row_origin[[r, p]] = row_origin[[p, r]]
            others = np.flatnonzero(work[:, c])
            others = others[others != r]
            work[others] ^= work[r]
            pivot_cols.append(c)
            r += 1
        if r < h.m:
            dependent = sorted(int(i) for i in row_origin[r:])
            raise ValueError(
                f"parity-check matrix is rank deficient: rows {dependent} are "
                f"linear combinations of the others"
            )
        self.pivot_cols = np.array(pivot_cols)
        free = np.ones(h.n, dtype=bool)
        free[self.pivot_cols] = False
        self.info_cols = np.flatnonzero(free)
        self.k = h.n - h.m
        # parity of pivot p is the GF(2) inner product of this row with the
        # info part of the codeword; int64 so the matmul cannot wrap
        self._parity_map = work[:, self.info_cols].astype(np.int64)

    def encode(self, info_bits):
        u = np.asarray(info_bits)
        if u.shape != (self.k,):
            raise ValueError(f"expected {self.k} information bits, got {u.shape}")
        if not np.isin(u, (0, 1)).all():
            raise ValueError("information bits must be 0/1")
        c = np.zeros(self.h.n, dtype=np.uint8)
        c[self.info_cols] = u
        c[self.pivot_cols] = (self._parity_map @ u.astype(np.int64)) % 2
        return c


def syndrome(h, bits):
    bits = np.asarray(bits)
    ev, _, coff, _, _, _ = _adjacency(h)
    return (np.add.reduceat(bits[ev].astype(np.int64), coff) % 2).astype(np.uint8)


def syndrome_ok(h, bits):
    return bool((syndrome(h, bits) == 0).all())


# ---------------------------------------------------------------------------
# parity polytope


@dataclass(frozen=True)
class ParityPolytope:
    """Linear description {b : A b <= theta} of even-parity constraints.

    a is integer CSR with entries in {-1, 0, +1}; theta the integer bias;
    lam the diagonal of A^T A (off-diagonals vanish by construction).
    check_offsets[j] is the first row of check j; rows for a check are
    ordered by increasing subset bitmask over its sorted columns.
    """

    a: sp.csr_matrix
    theta: np.ndarray
    lam: np.ndarray
    n: int
    check_offsets: np.ndarray

    @property
    def n_rows(self):
        return self.a.shape[0]


def build_parity_polytope(h):
    """Odd-subset box description of even parity per check.

    One row per odd-cardinality subset F of each check's support: +1 on F,
    -1 on the rest of the support, bias |F| - 1.  2^(d-1) rows per
    degree-d check.
    """
    indptr = [0]
    indices = []
    data = []
    theta = []
    offsets = []
    for cols in h.rows:
        offsets.append(len(theta))
        d = len(cols)
        for mask in range(1 << d):
            fsize = mask.bit_count()
            if fsize % 2 == 0:
                continue
            indices.extend(cols)
            data.extend(1 if (mask >> t) & 1 else -1 for t in range(d))
            indptr.append(len(indices))
            theta.append(fsize - 1)
    a = sp.csr_matrix(
        (np.array(data, dtype=np.int64), np.array(indices), np.array(indptr)),
        shape=(len(theta), h.n),
    )
    lam = np.zeros(h.n, dtype=np.int64)
    for j, cols in enumerate(h.rows):
        lam[list(cols)] += 1 << (len(cols) - 1)
    return ParityPolytope(
        a=a,
        theta=np.array(theta, dtype=np.int64),
        lam=lam,
        n=h.n,
        check_offsets=np.array(offsets, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# sum-product decoding


@lru_cache(maxsize=16)
def _adjacency(h):
    """Edge arrays for vectorized flooding BP, sorted by check."""
    edge_var = []
    edge_chk = []
    for j, cols in enumerate(h.rows):
        edge_var.extend(cols)
        edge_chk.extend([j] * len(cols))
    edge_var = np.array(edge_var, dtype=np.int64)
    edge_chk = np.array(edge_chk, dtype=np.int64)
    deg = h.row_degrees
    check_off = np.concatenate(([0], np.cumsum(deg)[:-1]))
    # reduceat segments per check; per-variable sums use np.add.at
    return edge_var, edge_chk, check_off, deg, h.n, h.m


def bp_decode_soft(h, channel_llrs, max_iter):
    """Flooding sum-product decoding.

    Positive LLR favors bit 0.  Returns (posterior_llrs, hard_bits,
    converged, iterations); stops as soon as the hard decision satisfies
    all checks.  max_iter = 0 just slices the channel LLRs.
    """
    llr = np.asarray(channel_llrs, dtype=float)
    if llr.shape != (h.n,):
        raise ValueError(f"expected {h.n} LLRs, got {llr.shape}")
    if not np.isfinite(llr).all():
        raise ValueError("channel LLRs must be finite")
    ev, _, coff, _, _, _ = _adjacency(h)

    hard = (llr <= 0).astype(np.uint8)
    if max_iter == 0 or syndrome_ok(h, hard):
        return llr.copy(), hard, syndrome_ok(h, hard), 0

    deg = h.row_degrees
    c2v = np.zeros(ev.shape[0])
    posterior = llr.copy()
    for it in range(1, max_iter + 1):
        v2c = posterior[ev] - c2v
        mag = np.clip(np.abs(v2c), _BP_MAG_FLOOR, _BP_LLR_CLIP)
        logt = np.log(np.tanh(0.5 * mag))
        total = np.add.reduceat(logt, coff)
        neg = v2c < 0
        flips = np.add.reduceat(neg.astype(np.int64), coff)
        loo_mag = np.repeat(total, deg) - logt
        loo_neg = np.repeat(flips, deg) - neg
        sign = np.where(loo_neg % 2 == 0, 1.0, -1.0)
        c2v = sign * 2.0 * np.arctanh(np.minimum(np.exp(loo_mag), 1.0 - 1e-16))
        posterior = llr.copy()
        np.add.at(posterior, ev, c2v)
        hard = (posterior <= 0).astype(np.uint8)
        if syndrome_ok(h, hard):
            return posterior, hard, True, it
    return posterior, hard, False, max_iter


def bp_decode(h, channel_llrs, max_iter):
    _, hard, converged, _ = bp_decode_soft(h, channel_llrs, max_iter)
    return hard, converged
