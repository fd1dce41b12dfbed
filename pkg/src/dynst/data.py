"""Synthetic spatio-temporal generators with known-irrelevant sensors, the
series/graph/manifest file formats, and dataset splitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .morph import GRAPH, IMAGE, Graph, STSeries

MAGIC = b"DYNST1\n"


class SeriesFormatError(ValueError):
    """Series container violates the on-disk format."""


@dataclass
class Dataset:
    """Windowed samples plus geometry, ground-truth noise set and split."""

    samples: list[tuple[STSeries, STSeries]]
    layout: str
    graph: Graph | None = None
    noise_units: list[int] | None = None
    split: tuple[list[int], list[int], list[int]] | None = None
    t_in: int = 0
    horizon: int = 0

    def __len__(self):
        return len(self.samples)

    def split_samples(self, which: str):
        if self.split is None:
            raise ValueError("dataset has no split; call split_811 first")
        idx = {"train": 0, "val": 1, "test": 2}[which]
        return [self.samples[i] for i in self.split[idx]]


def _cut_windows(values: np.ndarray, t_in: int, horizon: int):
    """Sliding (t_in, horizon) pairs along the leading time axis."""
    t_total = values.shape[0]
    for s in range(t_total - t_in - horizon + 1):
        yield values[s:s + t_in], values[s + t_in:s + t_in + horizon]


def stencil_step(u: np.ndarray, alpha: float) -> np.ndarray:
    """One explicit 5-point heat step with zero-flux boundaries."""
    lap = np.zeros_like(u)
    lap[1:, :] += u[:-1, :] - u[1:, :]
    lap[:-1, :] += u[1:, :] - u[:-1, :]
    lap[:, 1:] += u[:, :-1] - u[:, 1:]
    lap[:, :-1] += u[:, 1:] - u[:, :-1]
    return u + alpha * lap


def gen_diffusion_grid(seed: int, h: int, w: int, t_total: int, alpha: float,
                       num_samples: int, t_in: int = 8, horizon: int = 8) -> Dataset:
    """Heat-diffusing fields on an HxW grid, cut into sliding windows.

    Bump centers and widths are fixed per dataset seed, so the quiet regions
    are persistent across samples; per-trajectory amplitudes vary. Trajectories
    are generated until num_samples windows are collected.
    """
    if not 0.0 <= alpha <= 0.25:
        raise ValueError(
            f"alpha must lie in [0, 0.25] for 5-point stencil stability, got {alpha}"
        )
    if h < 3 or w < 3:
        raise ValueError(f"grid must be at least 3x3, got {h}x{w}")
    if t_total < t_in + horizon:
        raise ValueError(f"t_total={t_total} too short for windows of {t_in}+{horizon}")
    if num_samples < 1:
        raise ValueError("num_samples must be positive")
    rng = np.random.default_rng(seed)
    n_bumps = 3
    centers = rng.uniform([0, 0], [h - 1, w - 1], size=(n_bumps, 2))
    sigmas = rng.uniform(0.05, 0.10, size=n_bumps) * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    samples = []
    while len(samples) < num_samples:
        amps = rng.uniform(0.6, 1.4, size=n_bumps)
        u = np.zeros((h, w))
        for (cy, cx), s, a in zip(centers, sigmas, amps):
            u += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * s * s))
        frames = np.empty((t_total, h, w))
        frames[0] = u
        for t in range(1, t_total):
            frames[t] = stencil_step(frames[t - 1], alpha)
        for xin, yout in _cut_windows(frames, t_in, horizon):
            samples.append((
                STSeries(IMAGE, (t_in, 1, h, w), xin[:, None, :, :]),
                STSeries(IMAGE, (horizon, 1, h, w), yout[:, None, :, :]),
            ))
            if len(samples) == num_samples:
                break
    return Dataset(samples=samples, layout=IMAGE, t_in=t_in, horizon=horizon)


def _rgg_radius(n: int, expected_degree: float) -> float:
    """Radius giving the target expected degree on the unit square, including
    boundary truncation: mean neighborhood area is pi r^2 - (8/3) r^3 + r^4/2."""
    target = expected_degree / max(n - 1, 1)
    lo, hi = 0.0, 0.5
    for _ in range(60):
        r = 0.5 * (lo + hi)
        area = math.pi * r * r - (8.0 / 3.0) * r ** 3 + 0.5 * r ** 4
        if area < target:
            lo = r
        else:
            hi = r
    return 0.5 * (lo + hi)


def _geometric_graph(rng: np.random.Generator, n: int, expected_degree: float = 6.0):
    pos = rng.uniform(0.0, 1.0, size=(n, 2))
    radius = _rgg_radius(n, expected_degree)
    pairs = []
    for i in range(n):
        d2 = ((pos[i + 1:] - pos[i]) ** 2).sum(axis=1)
        for j in np.nonzero(d2 <= radius * radius)[0]:
            pairs.append((i, i + 1 + int(j)))
    return Graph.undirected(n, pairs)


def _connected(graph: Graph, nodes: list[int]) -> bool:
    node_set = set(nodes)
    if not node_set:
        return False
    nbrs = {u: [] for u in node_set}
    for u, v in graph.edges:
        if u in node_set and v in node_set:
            nbrs[u].append(v)
    seen = {nodes[0]}
    stack = [nodes[0]]
    while stack:
        for v in nbrs[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(node_set)


def gen_planted_graph(seed: int, n: int, noise_count: int, t_total: int,
                      num_samples: int, t_in: int = 8, horizon: int = 8,
                      noise_std: float = 1.0) -> Dataset:
    """Graph heat diffusion with designated noise nodes.

    Noise nodes are excluded from the diffusion coupling and observe i.i.d.
    noise; their target signal is identically zero, so pruning them is
    provably free. The signal subgraph must be connected (20 resampling
    attempts, then an error)."""
    if noise_count >= n:
        raise ValueError(f"noise_count={noise_count} must be smaller than n={n}")
    if t_total < t_in + horizon:
        raise ValueError(f"t_total={t_total} too short for windows of {t_in}+{horizon}")
    rng = np.random.default_rng(seed)
    graph = None
    for _ in range(20):
        cand = _geometric_graph(rng, n)
        # several noise designations per geometry; all draws stay seeded
        for _ in range(5):
            noise_nodes = np.sort(rng.choice(n, size=noise_count, replace=False))
            signal_nodes = [i for i in range(n) if i not in set(noise_nodes.tolist())]
            if _connected(cand, signal_nodes):
                graph = cand
                break
        if graph is not None:
            break
    if graph is None:
        raise RuntimeError("signal subgraph still disconnected after 20 resampling attempts")
    adj = graph.to_dense()
    sig = np.array(signal_nodes)
    a_sig = adj[np.ix_(sig, sig)]
    deg = np.maximum(a_sig.sum(axis=1, keepdims=True), 1.0)
    beta = 0.5
    samples = []
    while len(samples) < num_samples:
        u = rng.normal(0.0, 1.0, size=(sig.size, 1))
        clean = np.zeros((t_total, n, 1))
        obs = np.empty((t_total, n, 1))
        for t in range(t_total):
            clean[t, sig, 0] = u[:, 0]
            u = (1.0 - beta) * u + beta * (a_sig @ u) / deg
        obs[:] = clean
        obs[:, noise_nodes, 0] = rng.normal(0.0, noise_std, size=(t_total, noise_count))
        for (xin, _), (_, yout) in zip(_cut_windows(obs, t_in, horizon),
                                       _cut_windows(clean, t_in, horizon)):
            samples.append((
                STSeries(GRAPH, (t_in, n, 1), xin, adjacency=graph),
                STSeries(GRAPH, (horizon, n, 1), yout, adjacency=graph),
            ))
            if len(samples) == num_samples:
                break
    return Dataset(samples=samples, layout=GRAPH, graph=graph,
                   noise_units=[int(i) for i in noise_nodes], t_in=t_in, horizon=horizon)


def split_811(dataset: Dataset, seed: int) -> Dataset:
    """Seeded shuffle, then contiguous 80/10/10 partition of the sample list."""
    n = len(dataset.samples)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split 8:1:1, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = round_half_up(n / 10)
    n_val = round_half_up(n / 10)
    train = perm[: n - n_val - n_test].tolist()
    val = perm[n - n_val - n_test: n - n_test].tolist()
    test = perm[n - n_test:].tolist()
    dataset.split = (train, val, test)
    return dataset


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def save_series(series: STSeries, path) -> None:
    header = f"layout={series.layout} dims={','.join(str(d) for d in series.dims)}\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode())
        fh.write(series.values.astype("<f8").tobytes())


def load_series(path) -> STSeries:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise SeriesFormatError(f"{path}: bad magic, not a DYNST1 series file")
    try:
        end = buf.index(b"\n", len(MAGIC))
    except ValueError:
        raise SeriesFormatError(f"{path}: missing header line") from None
    header = buf[len(MAGIC):end].decode()
    fields = dict(part.split("=", 1) for part in header.split())
    if "layout" not in fields or "dims" not in fields:
        raise SeriesFormatError(f"{path}: malformed header {header!r}")
    layout = fields["layout"]
    dims = tuple(int(d) for d in fields["dims"].split(","))
    payload = buf[end + 1:]
    expected = int(np.prod(dims))
    if len(payload) != 8 * expected:
        raise SeriesFormatError(
            f"{path}: payload length mismatch, expected {expected} doubles "
            f"({8 * expected} bytes), found {len(payload)} bytes"
        )
    values = np.frombuffer(payload, dtype="<f8")
    if not np.isfinite(values).all():
        raise SeriesFormatError(f"{path}: non-finite values in payload")
    return STSeries(layout=layout, dims=dims, values=values.copy())


def save_graph(graph: Graph, path) -> None:
    """Text edge list; symmetric graphs store each undirected pair once."""
    lines = [f"nodes={graph.n}"]
    for u, v in graph.edges:
        if graph.symmetric and u > v:
            continue
        lines.append(f"{u} {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_graph(path) -> Graph:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("nodes="):
        raise ValueError(f"{path}: graph file must start with nodes=N")
    n = int(lines[0].split("=", 1)[1])
    pairs = []
    for ln in lines[1:]:
        u, v = ln.split()
        pairs.append((int(u), int(v)))
    return Graph.undirected(n, pairs)


def save_dataset(dataset: Dataset, out_dir, split_seed: int, extra: dict | None = None) -> None:
    """Write one series file per sample pair plus a key=value manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (xin, yout) in enumerate(dataset.samples):
        xi = f"sample_{i:05d}_in.series"
        yo = f"sample_{i:05d}_out.series"
        save_series(xin, out / xi)
        save_series(yout, out / yo)
        names.append((xi, yo))
    lines = [
        "format=dynst-dataset v1",
        f"layout={dataset.layout}",
        f"t_in={dataset.t_in}",
        f"horizon={dataset.horizon}",
        f"num_samples={len(dataset.samples)}",
        f"split_seed={split_seed}",
    ]
    if dataset.graph is not None:
        save_graph(dataset.graph, out / "graph.txt")
        lines.append("graph=graph.txt")
    if dataset.noise_units is not None:
        lines.append("noise_units=" + ",".join(str(u) for u in dataset.noise_units))
    for key, val in (extra or {}).items():
        lines.append(f"{key}={val}")
    lines.append("samples=" + ";".join(f"{a},{b}" for a, b in names))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    fields = {}
    for ln in manifest.read_text().splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        key, val = ln.split("=", 1)
        fields[key] = val
    if fields.get("format") != "dynst-dataset v1":
        raise ValueError(f"{manifest}: unknown dataset format {fields.get('format')!r}")
    graph = load_graph(root / fields["graph"]) if "graph" in fields else None
    samples = []
    for pair in fields["samples"].split(";"):
        xi, yo = pair.split(",")
        xin = load_series(root / xi)
        yout = load_series(root / yo)
        if graph is not None:
            xin.adjacency = graph
            yout.adjacency = graph
        samples.append((xin, yout))
    noise = None
    if "noise_units" in fields and fields["noise_units"]:
        noise = [int(u) for u in fields["noise_units"].split(",")]
    ds = Dataset(samples=samples, layout=fields["layout"], graph=graph,
                 noise_units=noise, t_in=int(fields["t_in"]),
                 horizon=int(fields["horizon"]))
    return split_811(ds, int(fields["split_seed"]))
