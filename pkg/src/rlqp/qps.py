"""QPS (MPS with a quadratic objective) reader and writer.

Free-format fields are accepted.  Variable bounds become identity rows of A
appended after the linear rows, so every problem lands in the single
``l <= Ax <= u`` form.
"""

from __future__ import annotations

import dataclasses
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .linalg import SparseMatrixCsc
from .solver import QpProblem

INFINITY = 1e30

SECTIONS = ("NAME", "ROWS", "COLUMNS", "RHS", "RANGES", "BOUNDS", "QUADOBJ", "ENDATA")
_ORDER = {name: k for k, name in enumerate(SECTIONS)}
_ORDER["QMATRIX"] = _ORDER["QUADOBJ"]

ROW_TYPES = ("N", "L", "G", "E")
BOUND_TYPES = ("UP", "LO", "FX", "FR", "MI", "PL")


class QpsError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclasses.dataclass
class QpsDocument:
    name: str = ""
    objective: Optional[str] = None
    rows: List[Tuple[str, str]] = dataclasses.field(default_factory=list)  # (type, name)
    columns: List[str] = dataclasses.field(default_factory=list)
    entries: List[Tuple[str, str, float]] = dataclasses.field(default_factory=list)  # col, row, v
    rhs: Dict[str, float] = dataclasses.field(default_factory=dict)
    ranges: Dict[str, float] = dataclasses.field(default_factory=dict)
    bounds: List[Tuple[str, str, float]] = dataclasses.field(default_factory=list)  # type, col, v
    quad: List[Tuple[str, str, float]] = dataclasses.field(default_factory=list)
    quad_section: str = "QUADOBJ"

    @property
    def constraint_rows(self) -> List[Tuple[str, str]]:
        return [r for r in self.rows if r[0] != "N"]

    @property
    def objective_constant(self) -> float:
        return -self.rhs.get(self.objective, 0.0) if self.objective else 0.0


def _number(tok: str, lineno: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise QpsError(f"malformed numeric field {tok!r}", lineno) from None
    if np.isnan(v):
        raise QpsError(f"malformed numeric field {tok!r}", lineno)
    return v


def _pairs(fields, lineno, what):
    if len(fields) not in (2, 4):
        raise QpsError(f"expected name/value pairs in {what}", lineno)
    return [(fields[k], _number(fields[k + 1], lineno)) for k in range(0, len(fields), 2)]


def parse_qps(text) -> QpsDocument:
    """Parse QPS text into a :class:`QpsDocument`, validating every reference."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("ascii")
        except UnicodeDecodeError as exc:
            raise QpsError(f"non-ASCII input at byte {exc.start}") from None
    doc = QpsDocument()
    row_types: Dict[str, str] = {}
    col_set = set()
    section = None
    last_order = -1
    ended = False
    lineno = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not line.strip() or line.lstrip().startswith("*"):
            continue
        if ended:
            raise QpsError("content after ENDATA", lineno)
        fields = line.split()
        if not line[0].isspace():
            head = fields[0].upper()
            if head not in _ORDER:
                raise QpsError(f"unknown section {fields[0]!r}", lineno)
            if _ORDER[head] <= last_order:
                raise QpsError(f"section {head} out of order", lineno)
            last_order = _ORDER[head]
            section = head
            if head == "NAME":
                doc.name = " ".join(fields[1:])
            elif head in ("QUADOBJ", "QMATRIX"):
                doc.quad_section = head
            elif head == "ENDATA":
                ended = True
            elif len(fields) > 1 and head not in ("RHS", "RANGES", "BOUNDS"):
                raise QpsError(f"unexpected tokens after {head}", lineno)
            continue

        if section is None or section == "NAME":
            raise QpsError("data line outside of a section", lineno)
        if section == "ROWS":
            if len(fields) != 2:
                raise QpsError("ROWS lines need a type and a name", lineno)
            rtype, rname = fields[0].upper(), fields[1]
            if rtype not in ROW_TYPES:
                raise QpsError(f"unknown row type {fields[0]!r}", lineno)
            if rname in row_types:
                raise QpsError(f"duplicate row {rname!r}", lineno)
            if rtype == "N":
                if doc.objective is not None:
                    raise QpsError("duplicate objective row", lineno)
                doc.objective = rname
            row_types[rname] = rtype
            doc.rows.append((rtype, rname))
        elif section == "COLUMNS":
            if "'MARKER'" in fields:
                raise QpsError("integer markers are not supported", lineno)
            if len(fields) not in (3, 5):
                raise QpsError("COLUMNS lines need column, row, value [, row, value]", lineno)
            col = fields[0]
            if col not in col_set:
                col_set.add(col)
                doc.columns.append(col)
            for rname, val in _pairs(fields[1:], lineno, "COLUMNS"):
                if rname not in row_types:
                    raise QpsError(f"undeclared row {rname!r}", lineno)
                doc.entries.append((col, rname, val))
        elif section in ("RHS", "RANGES"):
            body = fields[1:] if len(fields) in (3, 5) else fields
            target = doc.rhs if section == "RHS" else doc.ranges
            for rname, val in _pairs(body, lineno, section):
                if rname not in row_types:
                    raise QpsError(f"undeclared row {rname!r}", lineno)
                if section == "RANGES" and row_types[rname] == "N":
                    raise QpsError("RANGES on the objective row", lineno)
                target[rname] = val
        elif section == "BOUNDS":
            btype = fields[0].upper()
            if btype not in BOUND_TYPES:
                raise QpsError(f"unsupported bound type {fields[0]!r}", lineno)
            needs_value = btype in ("UP", "LO", "FX")
            if needs_value:
                if len(fields) not in (3, 4):
                    raise QpsError(f"{btype} bound needs a column and a value", lineno)
                col, val = fields[-2], _number(fields[-1], lineno)
            else:
                if len(fields) not in (2, 3):
                    raise QpsError(f"{btype} bound takes a column only", lineno)
                col, val = fields[-1], 0.0
            if col not in col_set:
                raise QpsError(f"undeclared column {col!r}", lineno)
            doc.bounds.append((btype, col, val))
        else:  # QUADOBJ / QMATRIX
            if len(fields) != 3:
                raise QpsError(f"{section} lines need two columns and a value", lineno)
            c1, c2 = fields[0], fields[1]
            for c in (c1, c2):
                if c not in col_set:
                    raise QpsError(f"undeclared column {c!r}", lineno)
            doc.quad.append((c1, c2, _number(fields[2], lineno)))
    if not ended:
        raise QpsError("missing ENDATA", lineno + 1)
    if doc.objective is None:
        raise QpsError("no objective (N) row")
    return doc


def _finite_or_inf(v: float) -> float:
    if v >= INFINITY:
        return np.inf
    if v <= -INFINITY:
        return -np.inf
    return v


def variable_bounds(doc: QpsDocument) -> Tuple[np.ndarray, np.ndarray]:
    col_index = {c: j for j, c in enumerate(doc.columns)}
    n = len(doc.columns)
    lo = np.zeros(n)
    up = np.full(n, np.inf)
    lo_set = np.zeros(n, dtype=bool)
    for btype, col, val in doc.bounds:
        j = col_index[col]
        val = _finite_or_inf(val)
        if btype == "UP":
            up[j] = val
            # Classic MPS rule: a negative upper bound with no lower bound frees the lower side.
            if val < 0 and not lo_set[j] and lo[j] == 0:
                lo[j] = -np.inf
        elif btype == "LO":
            lo[j] = val
            lo_set[j] = True
        elif btype == "FX":
            lo[j] = up[j] = val
            lo_set[j] = True
        elif btype == "FR":
            lo[j], up[j] = -np.inf, np.inf
            lo_set[j] = True
        elif btype == "MI":
            lo[j] = -np.inf
            lo_set[j] = True
        elif btype == "PL":
            up[j] = np.inf
    return lo, up


def to_qp(doc: QpsDocument) -> QpProblem:
    """Convert to ``min 1/2 x'Px + q'x  s.t.  l <= Ax <= u``.

    Bounded variables contribute identity rows after the linear rows; free
    variables contribute none.
    """
    col_index = {c: j for j, c in enumerate(doc.columns)}
    cons = doc.constraint_rows
    row_index = {name: i for i, (_, name) in enumerate(cons)}
    n, m_lin = len(doc.columns), len(cons)

    q = np.zeros(n)
    ri, ci, vals = [], [], []
    for col, rname, val in doc.entries:
        if rname == doc.objective:
            q[col_index[col]] += val
        else:
            ri.append(row_index[rname])
            ci.append(col_index[col])
            vals.append(val)
    A_lin = sp.csr_matrix((vals, (ri, ci)), shape=(m_lin, n))

    l_lin = np.empty(m_lin)
    u_lin = np.empty(m_lin)
    for i, (rtype, rname) in enumerate(cons):
        rhs = _finite_or_inf(doc.rhs.get(rname, 0.0))
        if rtype == "L":
            lo, hi = -np.inf, rhs
        elif rtype == "G":
            lo, hi = rhs, np.inf
        else:
            lo = hi = rhs
        if rname in doc.ranges:
            r = abs(doc.ranges[rname])
            if rtype == "L":
                lo = hi - r
            elif rtype == "G":
                hi = lo + r
            elif doc.ranges[rname] >= 0:
                hi = lo + r
            else:
                lo = hi - r
        l_lin[i], u_lin[i] = lo, hi

    lo, up = variable_bounds(doc)
    bad = np.flatnonzero(lo > up)
    if bad.size:
        raise QpsError(f"inconsistent bounds on column {doc.columns[bad[0]]!r}")
    bounded = np.flatnonzero(np.isfinite(lo) | np.isfinite(up))
    A_bnd = sp.csr_matrix((np.ones(bounded.size), (np.arange(bounded.size), bounded)),
                          shape=(bounded.size, n))
    A = sp.vstack([A_lin, A_bnd], format="csc")

    pi, pj, pv = [], [], []
    for c1, c2, val in doc.quad:
        i, j = col_index[c1], col_index[c2]
        if doc.quad_section == "QMATRIX" and i > j:
            continue  # both triangles are listed; keep one
        pi.append(min(i, j))
        pj.append(max(i, j))
        pv.append(val)
    P = sp.csc_matrix((pv, (pi, pj)), shape=(n, n))
    return QpProblem(SparseMatrixCsc.from_scipy(P), q, SparseMatrixCsc.from_scipy(A),
                     np.concatenate([l_lin, lo[bounded]]), np.concatenate([u_lin, up[bounded]]),
                     name=doc.name or "qps")


def read_qps(path) -> QpProblem:
    with open(path, "rb") as fh:
        return to_qp(parse_qps(fh.read()))


def _fmt(v: float) -> str:
    if v >= INFINITY or v == np.inf:
        return "1e+30"
    if v <= -INFINITY or v == -np.inf:
        return "-1e+30"
    return format(float(v), ".17g")


def write_qps(problem: QpProblem) -> str:
    """Emit QPS text; every row of A becomes a linear row and all columns are free."""
    n, m = problem.n, problem.m
    cols = [f"C{j + 1}" for j in range(n)]
    rows = [f"R{i + 1}" for i in range(m)]
    out = [f"NAME          {problem.name}", "ROWS", " N  OBJ"]
    kinds, rhs, ranges = [], {}, {}
    for i in range(m):
        lo, hi = problem.l[i], problem.u[i]
        lo_inf, hi_inf = lo <= -INFINITY, hi >= INFINITY
        if lo == hi:
            kinds.append("E")
            rhs[i] = lo
        elif lo_inf:
            kinds.append("L")
            rhs[i] = hi if not hi_inf else np.inf
        elif hi_inf:
            kinds.append("G")
            rhs[i] = lo
        else:
            kinds.append("G")
            rhs[i] = lo
            ranges[i] = hi - lo
        out.append(f" {kinds[-1]}  {rows[i]}")
    out.append("COLUMNS")
    A = problem.A.to_scipy().tocsc()
    for j in range(n):
        out.append(f"    {cols[j]}  OBJ  {_fmt(problem.q[j])}")
        for p in range(A.indptr[j], A.indptr[j + 1]):
            out.append(f"    {cols[j]}  {rows[A.indices[p]]}  {_fmt(A.data[p])}")
    out.append("RHS")
    for i, v in rhs.items():
        if v != 0:
            out.append(f"    RHS  {rows[i]}  {_fmt(v)}")
    if ranges:
        out.append("RANGES")
        for i, v in ranges.items():
            out.append(f"    RNG  {rows[i]}  {_fmt(v)}")
    out.append("BOUNDS")
    for j in range(n):
        out.append(f" FR BND  {cols[j]}")
    Pu = problem.P.to_scipy().tocoo()
    if Pu.nnz:
        out.append("QUADOBJ")
        for r, c, v in sorted(zip(Pu.row, Pu.col, Pu.data), key=lambda t: (t[0], t[1])):
            # Lower-triangle convention: first column index >= second.
            out.append(f"    {cols[c]}  {cols[r]}  {_fmt(v)}")
    out.append("ENDATA")
    return "\n".join(out) + "\n"
