"""Trainable per-sensor mask: scoring, application, sparsity accounting,
magnitude binarization and the drop/regrow exchange used during sparse
fine-tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .morph import MorphedInput

DENSE = "dense"
BINARY = "binary"


def round_count(x: float) -> int:
    """Half-away-from-zero rounding for unit counts."""
    return int(math.floor(x + 0.5))


@dataclass
class SensorMask:
    """Per-unit real scores plus the active/pruned partition.

    In dense mode every unit is active and all scores train. In binary mode
    the partition is fixed between exchanges: pruned scores are hard zeros,
    active scores restart from 1.0 after each binarization and may drift
    during mask training until the next binarization snaps them back.
    """

    scores: np.ndarray
    mode: str
    active: np.ndarray
    unit_rows: list[np.ndarray]

    def __post_init__(self):
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float64).reshape(-1)
        self.active = np.asarray(sorted(int(i) for i in self.active), dtype=np.int64)
        self.unit_rows = [np.asarray(r, dtype=np.int64) for r in self.unit_rows]
        u = self.scores.size
        if u < 1:
            raise ValueError("mask needs at least one unit")
        if len(self.unit_rows) != u:
            raise ValueError(f"unit_rows has {len(self.unit_rows)} entries for {u} units")
        if self.mode not in (DENSE, BINARY):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.active.size and (self.active[0] < 0 or self.active[-1] >= u):
            raise ValueError("active unit index out of range")

    @property
    def unit_count(self) -> int:
        return self.scores.size

    @property
    def pruned(self) -> np.ndarray:
        flags = np.ones(self.unit_count, dtype=bool)
        flags[self.active] = False
        return np.nonzero(flags)[0]

    @property
    def row_count(self) -> int:
        return sum(len(r) for r in self.unit_rows)

    def active_row_indices(self) -> np.ndarray:
        if not self.active.size:
            return np.array([], dtype=np.int64)
        return np.sort(np.concatenate([self.unit_rows[u] for u in self.active]))

    def row_scale(self) -> np.ndarray:
        """Per-row score column [rows, 1] (plain numpy, non-differentiable)."""
        out = np.empty((self.row_count, 1))
        for u, rows in enumerate(self.unit_rows):
            out[rows, 0] = self.scores[u]
        return out

    def active_indicator(self) -> np.ndarray:
        """0/1 unit indicator column [U, 1]."""
        ind = np.zeros((self.unit_count, 1))
        ind[self.active, 0] = 1.0
        return ind

    def dense_view(self) -> "SensorMask":
        """Structureless view sharing scores: used to compute mask gradients
        through the score relaxation (every unit treated as active)."""
        return SensorMask(scores=self.scores, mode=DENSE,
                          active=np.arange(self.unit_count), unit_rows=self.unit_rows)

    def has_identity_rows(self) -> bool:
        return all(r.size == 1 and r[0] == u for u, r in enumerate(self.unit_rows))

    def score_tensor(self) -> DiffTensor:
        return ad.parameter(self.scores.reshape(-1, 1))


def init_mask(unit_count: int, unit_rows=None) -> SensorMask:
    """Fully active dense mask, all scores 1.0."""
    if unit_count < 1:
        raise ValueError(f"unit_count must be positive, got {unit_count}")
    if unit_rows is None:
        unit_rows = [np.array([u]) for u in range(unit_count)]
    return SensorMask(scores=np.ones(unit_count), mode=DENSE,
                      active=np.arange(unit_count), unit_rows=unit_rows)


def expansion_matrix(mask: SensorMask) -> np.ndarray:
    """0/1 matrix [rows, U] mapping unit scores onto their morphed rows."""
    e = np.zeros((mask.row_count, mask.unit_count))
    for u, rows in enumerate(mask.unit_rows):
        e[rows, u] = 1.0
    return e


def apply_mask(mask: SensorMask, inputs, score_tensor: DiffTensor | None = None) -> DiffTensor:
    """Scale every row of a morphed input by its unit's score.

    Differentiable: pass a score_tensor (shape [U, 1], requires_grad) to read
    gradients w.r.t. the scores afterwards. Accepts a MorphedInput or a
    DiffTensor of shape [..., rows, cols].
    """
    x = inputs if isinstance(inputs, DiffTensor) else ad.constant(inputs.matrix)
    rows = x.shape[-2]
    if rows != mask.row_count:
        raise ValueError(
            f"mask covers {mask.row_count} rows but input has {rows} rows"
        )
    s = score_tensor if score_tensor is not None else ad.constant(mask.scores.reshape(-1, 1))
    if tuple(s.shape) != (mask.unit_count, 1):
        raise ValueError(f"score tensor must have shape ({mask.unit_count}, 1), got {tuple(s.shape)}")
    if mask.has_identity_rows():
        row_scores = s
    else:
        row_scores = ad.matmul(ad.constant(expansion_matrix(mask)), s)
    return ad.broadcast_mul(row_scores, x)


def sparsity(mask: SensorMask) -> float:
    """Fraction of deactivated units, 1 - active/U. Binary mode only."""
    if mask.mode != BINARY:
        raise ValueError("sparsity is undefined for a dense mask; binarize first")
    return 1.0 - mask.active.size / mask.unit_count


def binarize_prune(mask: SensorMask, prune_frac: float) -> SensorMask:
    """Zero the k = round(prune_frac * U) active units with smallest |score|,
    set the surviving active units to exactly 1. Ties break toward the lowest
    unit index."""
    if not 0.0 <= prune_frac <= 1.0:
        raise ValueError(f"prune_frac must lie in [0, 1], got {prune_frac}")
    u = mask.unit_count
    k = round_count(prune_frac * u)
    if k > mask.active.size:
        raise ValueError(
            f"cannot prune {k} units: only {mask.active.size} of {u} still active"
        )
    mags = np.abs(mask.scores[mask.active])
    order = np.lexsort((mask.active, mags))
    dropped = set(mask.active[order[:k]].tolist())
    new_active = np.array([a for a in mask.active if a not in dropped], dtype=np.int64)
    new_scores = np.zeros(u)
    new_scores[new_active] = 1.0
    return SensorMask(scores=new_scores, mode=BINARY, active=new_active,
                      unit_rows=mask.unit_rows)


def _check_grads(mask: SensorMask, mask_grads) -> np.ndarray:
    g = np.asarray(mask_grads, dtype=np.float64).reshape(-1)
    if g.size != mask.unit_count:
        raise ValueError(f"expected {mask.unit_count} mask gradients, got {g.size}")
    return g


def dst_drop(mask: SensorMask, mask_grads, q_frac: float) -> np.ndarray:
    """The k = round(q_frac * U) ACTIVE units with smallest |gradient|."""
    if mask.mode != BINARY:
        raise ValueError("dst_drop requires a binary mask")
    g = _check_grads(mask, mask_grads)
    k = round_count(q_frac * mask.unit_count)
    if k > mask.active.size:
        raise ValueError(f"cannot drop {k} units: only {mask.active.size} active")
    mags = np.abs(g[mask.active])
    order = np.lexsort((mask.active, mags))
    return np.sort(mask.active[order[:k]])


def dst_regrow(mask: SensorMask, mask_grads, q_frac: float) -> np.ndarray:
    """The k = round(q_frac * U) PRUNED units with largest |gradient|."""
    if mask.mode != BINARY:
        raise ValueError("dst_regrow requires a binary mask")
    g = _check_grads(mask, mask_grads)
    k = round_count(q_frac * mask.unit_count)
    pruned = mask.pruned
    if k > pruned.size:
        raise ValueError(f"cannot regrow {k} units: only {pruned.size} pruned")
    mags = np.abs(g[pruned])
    order = np.lexsort((pruned, -mags))
    return np.sort(pruned[order[:k]])


def dst_step(mask: SensorMask, mask_grads, q_frac: float) -> SensorMask:
    """One drop/regrow exchange; preserves the active-set cardinality."""
    drop = dst_drop(mask, mask_grads, q_frac)
    grow = dst_regrow(mask, mask_grads, q_frac)
    new_scores = mask.scores.copy()
    new_scores[drop] = 0.0
    new_scores[grow] = 1.0
    active = set(mask.active.tolist())
    active.difference_update(drop.tolist())
    active.update(grow.tolist())
    return SensorMask(scores=new_scores, mode=BINARY,
                      active=np.array(sorted(active), dtype=np.int64),
                      unit_rows=mask.unit_rows)


def save_mask(mask: SensorMask, path) -> None:
    """Plain-text table: one `unit_id,score,active` line per unit."""
    s = sparsity(mask) if mask.mode == BINARY else 0.0
    lines = [f"# dynst-mask v1 units={mask.unit_count} sparsity={s:.6f}"]
    flags = np.zeros(mask.unit_count, dtype=int)
    flags[mask.active] = 1
    for u in range(mask.unit_count):
        lines.append(f"{u},{mask.scores[u]:.17g},{flags[u]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mask(path) -> SensorMask:
    """Read a mask table. Files with any inactive unit load in binary mode;
    fully active files load as dense. Unit-to-row maps are not persisted, so
    the loaded mask uses the identity map; reattach a patch map if needed."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# dynst-mask v1"):
        raise ValueError(f"{path}: not a dynst-mask v1 file")
    scores, flags = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed mask line {ln!r}")
        scores.append(float(parts[1]))
        flags.append(int(parts[2]))
    scores = np.array(scores)
    flags = np.array(flags)
    active = np.nonzero(flags)[0]
    mode = BINARY if (flags == 0).any() else DENSE
    return SensorMask(scores=scores, mode=mode, active=active,
                      unit_rows=[np.array([u]) for u in range(scores.size)])
