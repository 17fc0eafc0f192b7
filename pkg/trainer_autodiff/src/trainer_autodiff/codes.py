"""LDPC parity-check matrices (alist files) and their polytope description.

The training stacks need the code only through the inequality block
{b : A b <= theta} built from odd-cardinality subsets of each check's
support, plus the diagonal Lambda of A^T A. This module reads the standard
alist text format and builds that block with the rows of a check ordered by
increasing subset bitmask over its sorted columns.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Code:
    """Parity-check matrix as sorted column tuples per check row."""

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
            if tuple(sorted(set(cols))) != tuple(cols):
                raise ValueError(f"row {j} columns not sorted and unique")
            if cols[0] < 0 or cols[-1] >= self.n:
                raise ValueError(f"row {j} has column index out of [0, {self.n})")


def parse_alist(text):
    """Code from alist text; errors carry the offending 1-based line."""
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
    col_deg = ints(3)
    if len(col_deg) != n:
        raise ValueError(f"line 3: expected {n} column degrees")
    row_deg = ints(4)
    if len(row_deg) != m:
        raise ValueError(f"line 4: expected {m} row degrees")

    def neighbors(lineno, degree, limit):
        vals = [t for t in ints(lineno) if t != 0]
        if len(vals) != degree:
            raise ValueError(
                f"line {lineno}: expected {degree} nonzero indices, got {len(vals)}")
        if len(set(vals)) != degree:
            raise ValueError(f"line {lineno}: duplicate position")
        for v in vals:
            if not 1 <= v <= limit:
                raise ValueError(f"line {lineno}: index {v} out of range 1..{limit}")
        return vals

    # the column lists are redundant with the row lists; parse both and
    # cross-check so a corrupt file cannot slip through
    col_lists = [neighbors(5 + i, col_deg[i], m) for i in range(n)]
    row_lists = [neighbors(5 + n + j, row_deg[j], n) for j in range(m)]
    from_cols = {(j - 1, i) for i, checks in enumerate(col_lists) for j in checks}
    from_rows = {(j, i - 1) for j, cols in enumerate(row_lists) for i in cols}
    if from_cols != from_rows:
        raise ValueError("alist row and column lists disagree")
    rows = tuple(tuple(sorted(i - 1 for i in cols)) for cols in row_lists)
    return Code(m=m, n=n, rows=rows)


def load_alist(path):
    with open(path) as f:
        return parse_alist(f.read())


@dataclass(frozen=True)
class Polytope:
    """{b : A b <= theta} with A in {-1,0,+1}, Lambda = diag(A^T A)."""

    a: np.ndarray
    theta: np.ndarray
    lam: np.ndarray
    n: int

    @property
    def n_rows(self):
        return self.a.shape[0]


def build_parity_polytope(code):
    """One row per odd subset F of each check: +1 on F, -1 on the rest of
    the support, bias |F| - 1; 2^(d-1) rows for a degree-d check."""
    rows = []
    theta = []
    for cols in code.rows:
        d = len(cols)
        for mask in range(1 << d):
            fsize = mask.bit_count()
            if fsize % 2 == 0:
                continue
            row = np.zeros(code.n)
            for t, i in enumerate(cols):
                row[i] = 1.0 if (mask >> t) & 1 else -1.0
            rows.append(row)
            theta.append(float(fsize - 1))
    lam = np.zeros(code.n)
    for cols in code.rows:
        lam[list(cols)] += float(1 << (len(cols) - 1))
    return Polytope(a=np.array(rows), theta=np.array(theta), lam=lam, n=code.n)


def syndrome_ok(code, bits):
    """True when the hard word satisfies every parity check."""
    b = np.asarray(bits).astype(int)
    return all(int(b[list(cols)].sum()) % 2 == 0 for cols in code.rows)
