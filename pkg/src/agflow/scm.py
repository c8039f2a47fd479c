"""Linear Gaussian structural models over ancestral graphs.

Generation follows a two-stage recipe: draw a random directed structure from
a degree-configuration model under a random topological order, then promote
some empty pairs to bidirected edges while keeping the graph ancestral.
Parameters attach coefficients to directed edges and error covariances to
bidirected pairs; data is drawn from the implied zero-mean Gaussian.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import GenerationError, GraphStructureError
from .graphs import (
    NO_EDGE,
    AncestralGraph,
    is_ancestral,
    node_pairs,
    relation_feature,
)

PRESET_NAMES = ("chain4", "iv", "collfork", "fig1")

COEF_RANGE = (0.5, 2.0)
OMEGA_DIAG_RANGE = (0.7, 1.3)
OMEGA_OFFDIAG_RANGE = (0.3, 0.6)
OMEGA_MIN_EIGENVALUE = 0.1
DEFAULT_BIDIRECTED_RATE = 0.2


@dataclass(frozen=True)
class ScmModel:
    """Coefficient matrix B (B[i][j] weights edge j -> i) and error covariance."""

    B: np.ndarray
    Omega: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        Om = np.asarray(self.Omega, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1] or B.shape != Om.shape:
            raise GraphStructureError(f"bad model shapes {B.shape} / {Om.shape}")
        if not np.allclose(Om, Om.T):
            raise GraphStructureError("Omega must be symmetric")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Omega", Om)
        eye = np.eye(self.n)
        if abs(np.linalg.det(eye - B)) < 1e-12:
            raise GraphStructureError("(I - B) must be invertible")

    @property
    def n(self) -> int:
        return self.B.shape[0]

    def implied_covariance(self) -> np.ndarray:
        """Sigma = (I - B)^{-1} Omega (I - B)^{-T}."""
        inv = np.linalg.inv(np.eye(self.n) - self.B)
        return inv @ self.Omega @ inv.T

    def to_json_obj(self) -> dict:
        return {"B": self.B.tolist(), "Omega": self.Omega.tolist()}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ScmModel":
        return cls(np.asarray(obj["B"], dtype=float), np.asarray(obj["Omega"], dtype=float))


@dataclass(frozen=True)
class Dataset:
    """Sample matrix (m rows, n columns) with column names."""

    values: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[0] < 2:
            raise ValueError(f"dataset needs >= 2 rows, got shape {vals.shape}")
        if vals.shape[1] != len(self.columns):
            raise ValueError("column name count does not match data width")
        if not np.isfinite(vals).all():
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.values:
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        rows = list(csv.reader(io.StringIO(text)))
        rows = [r for r in rows if r]
        if len(rows) < 3:
            raise ValueError("CSV needs a header row and at least 2 data rows")
        header = [c.strip() for c in rows[0]]
        if len(header) < 2:
            raise ValueError("CSV needs at least 2 columns")
        data = np.empty((len(rows) - 1, len(header)), dtype=float)
        for i, row in enumerate(rows[1:]):
            if len(row) != len(header):
                raise ValueError(f"row {i + 2}: expected {len(header)} cells, got {len(row)}")
            for j, cell in enumerate(row):
                try:
                    val = float(cell)
                except ValueError:
                    raise ValueError(
                        f"row {i + 2}, column {header[j]!r}: not a number: {cell!r}"
                    ) from None
                if not np.isfinite(val):
                    raise ValueError(f"row {i + 2}, column {header[j]!r}: non-finite value")
                data[i, j] = val
        return cls(data, tuple(header))


def default_columns(n: int) -> tuple[str, ...]:
    return tuple(f"V{i + 1}" for i in range(n))


def random_ancestral_structure(
    n: int,
    degree_max: int = 4,
    seed: int = 0,
    bidirected_rate: float = DEFAULT_BIDIRECTED_RATE,
    retries: int = 100,
) -> AncestralGraph:
    """Directed configuration model plus ancestrality-preserving confounding.

    In/out degrees are uniform on {0..degree_max}; stubs are matched at
    random and an edge is kept only when its tail precedes its head in a
    random node order, which rules out directed cycles by construction.
    Remaining empty pairs are then promoted to bidirected edges at rate
    ``bidirected_rate``, rejecting any promotion that breaks ancestrality.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    if degree_max == 0:
        return AncestralGraph.empty(n)
    for _ in range(retries):
        rank = rng.permutation(n)
        out_deg = rng.integers(0, degree_max + 1, size=n)
        in_deg = rng.integers(0, degree_max + 1, size=n)
        out_stubs = np.repeat(np.arange(n), out_deg)
        in_stubs = np.repeat(np.arange(n), in_deg)
        rng.shuffle(out_stubs)
        rng.shuffle(in_stubs)
        dirm = np.zeros((n, n), dtype=np.int8)
        for t, h in zip(out_stubs, in_stubs):
            if t != h and rank[t] < rank[h]:
                dirm[h, t] = 1
        if not dirm.any():
            continue
        bim = np.zeros((n, n), dtype=np.int8)
        g = AncestralGraph(dirm, bim, check=False)
        empty_pairs = [
            (u, v) for u, v in node_pairs(n) if relation_feature(g, (u, v)) == NO_EDGE
        ]
        order = rng.permutation(len(empty_pairs))
        promote = rng.random(len(empty_pairs)) < bidirected_rate
        for idx in order:
            if not promote[idx]:
                continue
            u, v = empty_pairs[idx]
            bim[u, v] = bim[v, u] = 1
            if not is_ancestral(AncestralGraph(dirm, bim, check=False)):
                bim[u, v] = bim[v, u] = 0
        result = AncestralGraph(dirm, bim)
        if not is_ancestral(result):
            raise GenerationError("generated structure failed the ancestrality check")
        return result
    raise GenerationError(f"no feasible degree sequence after {retries} retries")


def random_parameters(g: AncestralGraph, seed: int = 0) -> ScmModel:
    """Structure-compatible coefficients and a guaranteed-SPD error covariance.

    Coefficients are uniform on +/-[0.5, 2.0]. Omega starts diagonal with
    entries in [0.7, 1.3], gets symmetric off-diagonal entries in
    +/-[0.3, 0.6] on bidirected pairs, then is shifted by a multiple of the
    identity until its smallest eigenvalue reaches 0.1.
    """
    rng = np.random.default_rng(seed)
    n = g.n
    B = np.zeros((n, n))
    heads, tails = np.nonzero(g.dir)
    for i, j in zip(heads, tails):
        mag = rng.uniform(*COEF_RANGE)
        B[i, j] = mag if rng.random() < 0.5 else -mag
    Om = np.diag(rng.uniform(*OMEGA_DIAG_RANGE, size=n))
    for u, v in node_pairs(n):
        if g.bidir[u, v]:
            w = rng.uniform(*OMEGA_OFFDIAG_RANGE)
            if rng.random() < 0.5:
                w = -w
            Om[u, v] = Om[v, u] = w
    min_eig = float(np.linalg.eigvalsh(Om).min())
    if min_eig < OMEGA_MIN_EIGENVALUE:
        Om += (OMEGA_MIN_EIGENVALUE - min_eig) * np.eye(n)
    return ScmModel(B, Om)


def sample_dataset(model: ScmModel, m: int, seed: int = 0) -> Dataset:
    """Draw m rows from N(0, Sigma) via V = (I - B)^{-1} U, U ~ N(0, Omega)."""
    if m < 2:
        raise ValueError("need m >= 2 samples")
    rng = np.random.default_rng(seed)
    n = model.n
    chol = np.linalg.cholesky(model.Omega)
    noise = rng.standard_normal((m, n)) @ chol.T
    vals = np.linalg.solve(np.eye(n) - model.B, noise.T).T
    return Dataset(vals, default_columns(n))


def preset(name: str, search_dir: str | Path | None = None) -> AncestralGraph:
    """Load one of the shipped benchmark structures, or an override by name.

    When ``search_dir`` is given and contains ``<name>.json`` in the graph
    JSON schema, that file wins over the packaged default.
    """
    if search_dir is not None:
        path = Path(search_dir) / f"{name}.json"
        if path.exists():
            return AncestralGraph.from_json_obj(json.loads(path.read_text()))
    if name not in PRESET_NAMES:
        raise KeyError(f"unknown preset {name!r}; known: {PRESET_NAMES}")
    text = resources.files("agflow").joinpath(f"presets/{name}.json").read_text()
    return AncestralGraph.from_json_obj(json.loads(text))
