"""Stream-morph operator: fold the time axis into channels so every sensor
(grid pixel or graph node) becomes exactly one matrix row."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IMAGE = "image"
GRAPH = "graph"


@dataclass
class Graph:
    """Adjacency stored as a sorted, deduplicated directed edge list."""

    n: int
    edges: list[tuple[int, int]]
    symmetric: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"graph needs at least one node, got n={self.n}")
        edges = sorted(set((int(u), int(v)) for u, v in self.edges))
        for u, v in edges:
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise ValueError(f"edge ({u},{v}) out of range for n={self.n}")
            if u == v:
                raise ValueError(f"self-loop at node {u} not allowed")
        if self.symmetric:
            eset = set(edges)
            for u, v in edges:
                if (v, u) not in eset:
                    raise ValueError(f"symmetric graph missing reverse edge ({v},{u})")
        self.edges = edges

    @classmethod
    def undirected(cls, n: int, pairs) -> "Graph":
        both = []
        for u, v in pairs:
            both.append((u, v))
            both.append((v, u))
        return cls(n=n, edges=both, symmetric=True)

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for u, v in self.edges:
            a[u, v] = 1.0
        return a


@dataclass
class STSeries:
    """Raw spatio-temporal observations.

    layout "image": dims (T, C, H, W); layout "graph": dims (T, N, D).
    Values are stored row-major in the dims order.
    """

    layout: str
    dims: tuple[int, ...]
    values: np.ndarray
    adjacency: Graph | None = None

    def __post_init__(self):
        if self.layout not in (IMAGE, GRAPH):
            raise ValueError(f"unknown layout {self.layout!r}")
        want = 4 if self.layout == IMAGE else 3
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != want or any(d < 1 for d in self.dims):
            raise ValueError(f"{self.layout} layout needs {want} positive dims, got {self.dims}")
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.size != int(np.prod(self.dims)):
            raise ValueError(
                f"values length {vals.size} does not match dims {self.dims}"
            )
        self.values = vals.reshape(self.dims)


@dataclass
class MorphedInput:
    """Time-folded matrix [sensors x (T*C)] plus the geometry needed to invert."""

    rows: int
    cols: int
    matrix: np.ndarray
    layout: str
    source_dims: tuple[int, ...]
    grid: tuple[int, int] | None = None
    patch: int | None = None
    adjacency: Graph | None = None


def morph(series: STSeries) -> MorphedInput:
    """Fold (t,c,h,w) -> row h*W+w, col t*C+c; (t,n,d) -> row n, col t*D+d."""
    v = series.values
    if series.layout == IMAGE:
        t, c, h, w = series.dims
        mat = np.ascontiguousarray(v.transpose(2, 3, 0, 1).reshape(h * w, t * c))
        return MorphedInput(rows=h * w, cols=t * c, matrix=mat, layout=IMAGE,
                            source_dims=series.dims, grid=(h, w))
    t, n, d = series.dims
    mat = np.ascontiguousarray(v.transpose(1, 0, 2).reshape(n, t * d))
    return MorphedInput(rows=n, cols=t * d, matrix=mat, layout=GRAPH,
                        source_dims=series.dims, adjacency=series.adjacency)


def unmorph(m: MorphedInput) -> STSeries:
    """Invert morph; bit-exact round trip."""
    if not m.source_dims:
        raise ValueError("unmorph requires provenance (source dims missing)")
    if m.layout == IMAGE:
        t, c, h, w = m.source_dims
        vals = m.matrix.reshape(h, w, t, c).transpose(2, 3, 0, 1)
        return STSeries(layout=IMAGE, dims=m.source_dims, values=np.ascontiguousarray(vals))
    t, n, d = m.source_dims
    vals = m.matrix.reshape(n, t, d).transpose(1, 0, 2)
    return STSeries(layout=GRAPH, dims=m.source_dims, values=np.ascontiguousarray(vals),
                    adjacency=m.adjacency)


def unmorph_matrix(matrix: np.ndarray, layout: str, source_dims: tuple[int, ...]) -> np.ndarray:
    """Unfold a [rows, T*C] matrix (e.g. model predictions) back to field shape."""
    if layout == IMAGE:
        t, c, h, w = source_dims
        return np.ascontiguousarray(matrix.reshape(h, w, t, c).transpose(2, 3, 0, 1))
    t, n, d = source_dims
    return np.ascontiguousarray(matrix.reshape(n, t, d).transpose(1, 0, 2))


def patchify(m: MorphedInput, patch: int) -> list[list[int]]:
    """Partition image rows into (H/p)*(W/p) blocks of p*p rows, row-major
    over blocks. Each block is the sensing area of one sensor."""
    if m.layout != IMAGE:
        raise ValueError("patchify applies to image-layout inputs only")
    h, w = m.grid
    if patch < 1 or h % patch != 0 or w % patch != 0:
        raise ValueError(f"patch size {patch} does not divide grid {h}x{w}")
    sets = []
    for bi in range(h // patch):
        for bj in range(w // patch):
            sets.append([
                (bi * patch + dy) * w + (bj * patch + dx)
                for dy in range(patch)
                for dx in range(patch)
            ])
    return sets
