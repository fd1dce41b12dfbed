"""Forecasting backbones over morphed inputs: a shared-weight per-sensor MLP
and a message-passing graph network, plus compacted (active-only) inference."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .mask import BINARY, SensorMask
from .morph import Graph


def _uniform_param(rng: np.random.Generator, shape, fan_in: int) -> DiffTensor:
    bound = 1.0 / np.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    w = _uniform_param(rng, (fan_in, fan_out), fan_in)
    b = _uniform_param(rng, (1, fan_out), fan_in)
    return w, b


def _ones_column(x: DiffTensor) -> DiffTensor:
    return ad.constant(np.ones(x.shape[:-1] + (1,)))


def _affine(x: DiffTensor, w: DiffTensor, b: DiffTensor) -> DiffTensor:
    # bias broadcast via ones-matmul keeps add strictly same-shape
    return ad.add(ad.matmul(x, w), ad.matmul(_ones_column(x), b))


class NodeMlp:
    """Per-sensor MLP with weights shared across all rows."""

    kind = "mlp"

    def __init__(self, in_width: int, hidden: list[int], out_width: int,
                 rng: np.random.Generator):
        self.widths = [int(in_width)] + [int(h) for h in hidden] + [int(out_width)]
        if any(w < 1 for w in self.widths):
            raise ValueError(f"layer widths must be positive, got {self.widths}")
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w, b = _init_linear(rng, fan_in, fan_out)
            self.weights.append(w)
            self.biases.append(b)

    def named_params(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        return out

    def forward(self, x: DiffTensor, graph: Graph | None = None,
                mask: SensorMask | None = None) -> DiffTensor:
        if x.shape[-1] != self.widths[0]:
            raise ValueError(
                f"input width {x.shape[-1]} does not match model width {self.widths[0]}"
            )
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = _affine(h, w, b)
            if i != last:
                h = ad.relu(h)
        return h


class MessagePassingNet:
    """L message-passing layers with masked-mean neighbor aggregation.

    Aggregation averages over ACTIVE neighbors only (zero when a node has
    none), and hidden states of pruned nodes are re-zeroed after every layer,
    so deactivating a sensor is exactly equivalent to removing it.
    """

    kind = "mpn"

    def __init__(self, in_width: int, hidden: int, out_width: int, layers: int,
                 rng: np.random.Generator):
        if layers < 1:
            raise ValueError(f"need at least one message-passing layer, got {layers}")
        self.in_width = int(in_width)
        self.hidden = int(hidden)
        self.out_width = int(out_width)
        self.layers = int(layers)
        self.w_self, self.w_nbr, self.biases = [], [], []
        width = self.in_width
        for _ in range(self.layers):
            ws, b = _init_linear(rng, width, self.hidden)
            wn = _uniform_param(rng, (width, self.hidden), width)
            self.w_self.append(ws)
            self.w_nbr.append(wn)
            self.biases.append(b)
            width = self.hidden
        self.w_out, self.b_out = _init_linear(rng, width, self.out_width)

    def named_params(self):
        out = []
        for i in range(self.layers):
            out.append((f"w_self{i}", self.w_self[i]))
            out.append((f"w_nbr{i}", self.w_nbr[i]))
            out.append((f"b{i}", self.biases[i]))
        out.append(("w_out", self.w_out))
        out.append(("b_out", self.b_out))
        return out

    @staticmethod
    def _masked_mean_matrix(graph: Graph, indicator: np.ndarray) -> np.ndarray:
        adj = graph.to_dense() * indicator.reshape(1, -1)
        counts = adj.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(counts > 0, adj / np.where(counts > 0, counts, 1.0), 0.0)
        return s

    def forward(self, x: DiffTensor, graph: Graph | None = None,
                mask: SensorMask | None = None) -> DiffTensor:
        if graph is None:
            raise ValueError("MessagePassingNet requires a graph")
        if x.shape[-2] != graph.n:
            raise ValueError(f"input has {x.shape[-2]} rows but graph has {graph.n} nodes")
        if x.shape[-1] != self.in_width:
            raise ValueError(
                f"input width {x.shape[-1]} does not match model width {self.in_width}"
            )
        if mask is not None and mask.mode == BINARY:
            indicator = mask.active_indicator()
        else:
            indicator = np.ones((graph.n, 1))
        all_active = bool(indicator.all())
        s_const = ad.constant(self._masked_mean_matrix(graph, indicator))
        ind_const = ad.constant(indicator)
        h = x
        for i in range(self.layers):
            agg = ad.matmul(s_const, h)
            pre = ad.add(_affine(h, self.w_self[i], self.biases[i]),
                         ad.matmul(agg, self.w_nbr[i]))
            h = ad.relu(pre)
            if not all_active:
                h = ad.broadcast_mul(ind_const, h)
        return _affine(h, self.w_out, self.b_out)


def forward(model, x: DiffTensor, graph: Graph | None = None,
            mask: SensorMask | None = None) -> DiffTensor:
    """Full forward pass over all rows of a (masked) morphed input."""
    return model.forward(x, graph=graph, mask=mask)


def compact_forward(model, x: DiffTensor, graph: Graph | None = None,
                    mask: SensorMask | None = None) -> DiffTensor:
    """Inference on the physically reduced problem: active rows only, induced
    subgraph on active nodes. Matches forward() on active rows to 1e-9."""
    if mask is None or mask.mode != BINARY:
        raise ValueError("compact_forward requires a binary mask")
    rows = mask.active_row_indices()
    x_c = ad.constant(np.ascontiguousarray(x.values[..., rows, :]))
    if isinstance(model, NodeMlp):
        return model.forward(x_c)
    if graph is None:
        raise ValueError("MessagePassingNet requires a graph")
    active = mask.active
    pos = {int(n): i for i, n in enumerate(active)}
    sub_edges = [(pos[u], pos[v]) for u, v in graph.edges if u in pos and v in pos]
    sub = Graph(n=len(active), edges=sub_edges, symmetric=graph.symmetric)
    return model.forward(x_c, graph=sub)


def save_model(model, path) -> None:
    """Checkpoint: text header and meta lines, then one record per tensor with
    row-major little-endian float64 payload."""
    chunks = [b"# dynst-ckpt v1\n"]
    chunks.append(f"meta kind={model.kind}\n".encode())
    if isinstance(model, NodeMlp):
        chunks.append(f"meta widths={','.join(str(w) for w in model.widths)}\n".encode())
    else:
        chunks.append(
            f"meta mpn={model.in_width},{model.hidden},{model.out_width},{model.layers}\n".encode()
        )
    for name, p in model.named_params():
        shape = ",".join(str(d) for d in p.shape)
        chunks.append(f"tensor {name} {shape}\n".encode())
        chunks.append(p.values.astype("<f8").tobytes())
        chunks.append(b"\n")
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _read_line(buf: bytes, pos: int):
    end = buf.index(b"\n", pos)
    return buf[pos:end].decode(), end + 1


def load_model(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    line, pos = _read_line(buf, 0)
    if line != "# dynst-ckpt v1":
        raise ValueError(f"{path}: not a dynst-ckpt v1 file")
    meta = {}
    while pos < len(buf) and buf[pos:pos + 5] == b"meta ":
        line, pos = _read_line(buf, pos)
        key, val = line[5:].split("=", 1)
        meta[key] = val
    rng = np.random.default_rng(0)
    if meta.get("kind") == "mlp":
        widths = [int(v) for v in meta["widths"].split(",")]
        model = NodeMlp(widths[0], widths[1:-1], widths[-1], rng)
    elif meta.get("kind") == "mpn":
        iw, hid, ow, lay = (int(v) for v in meta["mpn"].split(","))
        model = MessagePassingNet(iw, hid, ow, lay, rng)
    else:
        raise ValueError(f"{path}: unknown backbone kind {meta.get('kind')!r}")
    params = dict(model.named_params())
    while pos < len(buf):
        line, pos = _read_line(buf, pos)
        if not line.strip():
            continue
        if not line.startswith("tensor "):
            raise ValueError(f"{path}: malformed checkpoint record {line!r}")
        _, name, shape_s = line.split(" ")
        shape = tuple(int(d) for d in shape_s.split(","))
        count = int(np.prod(shape))
        raw = buf[pos:pos + 8 * count]
        if len(raw) != 8 * count:
            raise ValueError(f"{path}: truncated payload for tensor {name}")
        pos += 8 * count + 1  # trailing newline
        if name not in params:
            raise ValueError(f"{path}: unexpected tensor {name}")
        vals = np.frombuffer(raw, dtype="<f8").reshape(shape)
        params[name].values = np.ascontiguousarray(vals)
    return model
