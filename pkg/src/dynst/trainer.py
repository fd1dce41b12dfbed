"""Training orchestration: alternating model/mask optimization, iterative
pruning with sparse fine-tuning between prunes, and the one-shot and
constant-sparsity scheme variants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import mask as mk
from .autodiff import DiffTensor
from .data import Dataset
from .mask import BINARY, DENSE, SensorMask
from .models import MessagePassingNet, NodeMlp
from .morph import GRAPH, IMAGE, Graph, morph, patchify

ACTIVE_UNITS = "active-units"
ALL_UNITS = "all-units"
SCHEMES = ("ip", "os", "dst")


class ScheduleError(ValueError):
    """Schedule is inconsistent or cannot reach its sparsity target."""


@dataclass
class Schedule:
    """All training hyperparameters for one run."""

    target_sparsity: float
    prune_frac: float = 0.03
    exchange_frac: float = 0.01
    model_iters: int = 100
    mask_iters: int = 20
    dst_interval: int = 20
    dst_steps: int = 3
    lr_model: float = 1e-2
    lr_mask: float = 1e-2
    scheme: str = "ip"
    seed: int = 0
    loss_scope: str = ACTIVE_UNITS
    finetune_iters: int = 300

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.target_sparsity < 1.0:
            raise ScheduleError(f"target_sparsity must lie in (0, 1), got {self.target_sparsity}")
        if not 0.0 < self.prune_frac <= self.target_sparsity:
            raise ScheduleError(
                f"prune_frac must lie in (0, target_sparsity], got {self.prune_frac}"
            )
        if not 0.0 <= self.exchange_frac < self.prune_frac:
            raise ScheduleError(
                f"exchange_frac must be smaller than prune_frac, got {self.exchange_frac}"
            )
        for name in ("model_iters", "mask_iters", "dst_interval", "dst_steps", "finetune_iters"):
            if getattr(self, name) < 0:
                raise ScheduleError(f"{name} must be >= 0")
        if self.scheme not in SCHEMES:
            raise ScheduleError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.loss_scope not in (ACTIVE_UNITS, ALL_UNITS):
            raise ScheduleError(f"unknown loss_scope {self.loss_scope!r}")

    @property
    def rounds(self) -> int:
        return math.ceil(self.target_sparsity / self.prune_frac - 1e-12)

    def theta_budget(self) -> int:
        """Total model iterations; shared across schemes for fair comparison."""
        r = self.rounds
        return r * self.model_iters + r * self.dst_steps * self.dst_interval + self.finetune_iters


def preflight(schedule: Schedule, unit_count: int) -> None:
    """Reject schedules whose rounding can never reach or would overshoot the
    sparsity target before any training happens."""
    k = mk.round_count(schedule.prune_frac * unit_count)
    if k < 1:
        raise ScheduleError(
            f"prune_frac={schedule.prune_frac} rounds to zero units of {unit_count}; "
            "target sparsity is unreachable"
        )
    pruned = 0
    while pruned / unit_count < schedule.target_sparsity - 1e-12:
        pruned += k
    if unit_count - pruned < 1:
        raise ScheduleError(
            f"schedule overshoots: pruning {pruned} of {unit_count} units leaves no active unit"
        )
    k_exchange = mk.round_count(schedule.exchange_frac * unit_count)
    if k_exchange > min(k, unit_count - pruned):
        raise ScheduleError(
            f"exchange of {k_exchange} units exceeds the first pruned pool ({k}) "
            f"or the final active set ({unit_count - pruned})"
        )


@dataclass
class PreparedData:
    """Morphed, batched splits: arrays of shape [samples, rows, T*C]."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    layout: str
    graph: Graph | None
    unit_rows: list[np.ndarray]
    input_dims: tuple[int, ...]
    target_dims: tuple[int, ...]

    @property
    def rows(self) -> int:
        return self.train_x.shape[1]

    @property
    def unit_count(self) -> int:
        return len(self.unit_rows)


def prepare(dataset: Dataset, patch: int = 1) -> PreparedData:
    """Morph every sample and stack the splits into dense batches."""
    if dataset.split is None:
        raise ValueError("dataset must be split before training")
    first_in = morph(dataset.samples[0][0])
    if dataset.layout == IMAGE:
        unit_rows = [np.array(r) for r in patchify(first_in, patch)]
    else:
        unit_rows = [np.array([r]) for r in range(first_in.rows)]

    def stack(pairs):
        xs = np.stack([morph(a).matrix for a, _ in pairs]) if pairs else \
            np.zeros((0, first_in.rows, first_in.cols))
        ys = np.stack([morph(b).matrix for _, b in pairs]) if pairs else \
            np.zeros((0, first_in.rows, 0))
        return xs, ys

    train = stack(dataset.split_samples("train"))
    val = stack(dataset.split_samples("val"))
    test = stack(dataset.split_samples("test"))
    return PreparedData(
        train_x=train[0], train_y=train[1], val_x=val[0], val_y=val[1],
        test_x=test[0], test_y=test[1], layout=dataset.layout,
        graph=dataset.graph, unit_rows=unit_rows,
        input_dims=dataset.samples[0][0].dims, target_dims=dataset.samples[0][1].dims,
    )


def build_model(backbone: str, prepared: PreparedData, seed: int,
                hidden=(64, 64), mpn_hidden: int = 64, mpn_layers: int = 3):
    rng = np.random.default_rng(seed)
    in_width = prepared.train_x.shape[2]
    out_width = prepared.train_y.shape[2]
    if backbone == "mlp":
        return NodeMlp(in_width, list(hidden), out_width, rng)
    if backbone == "mpn":
        if prepared.graph is None:
            raise ValueError("mpn backbone requires a graph dataset")
        return MessagePassingNet(in_width, mpn_hidden, out_width, mpn_layers, rng)
    raise ValueError(f"unknown backbone {backbone!r}")


def mse_loss(pred: DiffTensor, target, mask: SensorMask | None = None,
             scope: str = ALL_UNITS) -> DiffTensor:
    """Mean squared error over selected rows and all outputs."""
    t = target if isinstance(target, DiffTensor) else ad.constant(target)
    if pred.shape != t.shape:
        raise ad.ShapeMismatchError(
            f"loss: prediction shape {tuple(pred.shape)} vs target shape {tuple(t.shape)}"
        )
    sq = ad.square(ad.sub(pred, t))
    if scope == ALL_UNITS:
        return ad.mean_reduce(sq)
    if scope != ACTIVE_UNITS:
        raise ValueError(f"unknown loss scope {scope!r}")
    if mask is None or mask.mode != BINARY:
        raise ValueError("active-units loss scope requires a binary mask")
    rows = mask.active_row_indices()
    if rows.size == 0:
        raise ValueError("active set is empty; loss undefined")
    ind = np.zeros((mask.row_count, 1))
    ind[rows, 0] = 1.0
    picked = ad.broadcast_mul(ad.constant(ind), sq)
    count = sq.values.size // sq.shape[-2] * rows.size
    return ad.mul(ad.sum_reduce(picked), ad.constant(np.array([1.0 / count])))


def _effective_scope(mask: SensorMask, scope: str) -> str:
    return ALL_UNITS if mask.mode == DENSE else scope


def _sgd(params, lr: float) -> None:
    for _, p in params:
        if p.grad is not None:
            p.values -= lr * p.grad
        p.zero_grad()


def _set_requires_grad(model, flag: bool) -> None:
    for _, p in model.named_params():
        p.requires_grad = flag


def model_step(model, x_masked: np.ndarray, y: np.ndarray, graph, mask,
               scope: str, lr: float) -> float:
    """One gradient-descent step on the model parameters, mask frozen."""
    pred = model.forward(ad.constant(x_masked), graph=graph, mask=mask)
    loss = mse_loss(pred, y, mask, _effective_scope(mask, scope))
    ad.backward(loss)
    _sgd(model.named_params(), lr)
    return float(loss.values[0])


def mask_step(model, mask: SensorMask, x: np.ndarray, y: np.ndarray, graph,
              scope: str, lr: float) -> float:
    """One gradient-descent step on the mask scores, model frozen. In binary
    mode only active scores move; pruned scores stay hard zeros."""
    scores = mask.score_tensor()
    _set_requires_grad(model, False)
    try:
        masked = mk.apply_mask(mask, ad.constant(x), scores)
        pred = model.forward(masked, graph=graph, mask=mask)
        loss = mse_loss(pred, y, mask, _effective_scope(mask, scope))
        ad.backward(loss)
    finally:
        _set_requires_grad(model, True)
    g = scores.grad[:, 0]
    if mask.mode == BINARY:
        mask.scores[mask.active] -= lr * g[mask.active]
    else:
        mask.scores -= lr * g
    return float(loss.values[0])


def mask_gradients(model, mask: SensorMask, x: np.ndarray, y: np.ndarray, graph) -> np.ndarray:
    """Score gradients on the dense relaxation with all-units loss.

    The relaxation treats every unit as structurally active so pruned scores
    keep a gradient path (the inner product of the unit's features with the
    upstream gradient), which is what makes regrow scoring well-defined."""
    view = mask.dense_view()
    scores = view.score_tensor()
    _set_requires_grad(model, False)
    try:
        masked = mk.apply_mask(view, ad.constant(x), scores)
        pred = model.forward(masked, graph=graph, mask=view)
        loss = mse_loss(pred, y, view, ALL_UNITS)
        ad.backward(loss)
    finally:
        _set_requires_grad(model, True)
    return scores.grad[:, 0].copy()


@dataclass
class TrainState:
    model: object
    mask: SensorMask
    round_idx: int = 0
    step: int = 0
    loss_history: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    last_val_mae: float = float("nan")
    rng: np.random.Generator | None = None

    def current_sparsity(self) -> float:
        return mk.sparsity(self.mask) if self.mask.mode == BINARY else 0.0

    def log(self, train_loss: float) -> None:
        self.step += 1
        self.loss_history.append(train_loss)
        self.trace.append((self.step, self.round_idx, self.current_sparsity(),
                           train_loss, self.last_val_mae))


def predict(model, x: np.ndarray, graph, mask) -> np.ndarray:
    return model.forward(ad.constant(x), graph=graph, mask=mask).values


def _masked_inputs(mask: SensorMask, x: np.ndarray) -> np.ndarray:
    return mask.row_scale() * x


def val_mae(state: TrainState, prepared: PreparedData) -> float:
    """All-units MAE on the validation split under the current mask."""
    if prepared.val_x.shape[0] == 0:
        return float("nan")
    xm = _masked_inputs(state.mask, prepared.val_x)
    pred = predict(state.model, xm, prepared.graph, state.mask)
    return float(np.abs(pred - prepared.val_y).mean())


def alternate_round(state: TrainState, prepared: PreparedData, schedule: Schedule) -> TrainState:
    """Model for model_iters steps with the mask frozen, then mask scores for
    mask_iters steps with the model frozen."""
    xm = _masked_inputs(state.mask, prepared.train_x)
    for _ in range(schedule.model_iters):
        loss = model_step(state.model, xm, prepared.train_y, prepared.graph,
                          state.mask, schedule.loss_scope, schedule.lr_model)
        state.log(loss)
    for _ in range(schedule.mask_iters):
        loss = mask_step(state.model, state.mask, prepared.train_x, prepared.train_y,
                         prepared.graph, schedule.loss_scope, schedule.lr_mask)
        state.log(loss)
    return state


def dst_finetune(state: TrainState, prepared: PreparedData, schedule: Schedule,
                 exchanges: int | None = None) -> TrainState:
    """Sparse fine-tuning: train the model for dst_interval steps, then one
    drop/regrow exchange; sparsity is constant throughout."""
    steps = schedule.dst_steps if exchanges is None else exchanges
    for _ in range(steps):
        xm = _masked_inputs(state.mask, prepared.train_x)
        for _ in range(schedule.dst_interval):
            loss = model_step(state.model, xm, prepared.train_y, prepared.graph,
                              state.mask, schedule.loss_scope, schedule.lr_model)
            state.log(loss)
        grads = mask_gradients(state.model, state.mask, prepared.train_x,
                               prepared.train_y, prepared.graph)
        state.mask = mk.dst_step(state.mask, grads, schedule.exchange_frac)
    return state


def _theta_only(state: TrainState, prepared: PreparedData, schedule: Schedule,
                iters: int) -> None:
    xm = _masked_inputs(state.mask, prepared.train_x)
    for _ in range(iters):
        loss = model_step(state.model, xm, prepared.train_y, prepared.graph,
                          state.mask, schedule.loss_scope, schedule.lr_model)
        state.log(loss)


def run(model, dataset_or_prepared, schedule: Schedule, patch: int = 1):
    """Execute the configured scheme; returns (model, binary mask, trace).

    ip:  repeat {alternate; binarize-prune prune_frac; sparse fine-tune}
         until the sparsity target is reached, then a model-only fine-tune.
    os:  one large alternate phase, a single prune to the target, fine-tune.
    dst: alternate warmup, prune straight to the target, then exchanges at
         constant sparsity for the bulk of the budget, then fine-tune.
    """
    prepared = dataset_or_prepared if isinstance(dataset_or_prepared, PreparedData) \
        else prepare(dataset_or_prepared, patch)
    u = prepared.unit_count
    preflight(schedule, u)
    state = TrainState(model=model,
                       mask=mk.init_mask(u, prepared.unit_rows),
                       rng=np.random.default_rng(schedule.seed))
    state.last_val_mae = val_mae(state, prepared)
    target = schedule.target_sparsity

    if schedule.scheme == "ip":
        while state.current_sparsity() < target - 1e-12:
            state.round_idx += 1
            alternate_round(state, prepared, schedule)
            binarize_and_log(state, schedule.prune_frac)
            dst_finetune(state, prepared, schedule)
            state.last_val_mae = val_mae(state, prepared)
        _theta_only(state, prepared, schedule, schedule.finetune_iters)
    elif schedule.scheme == "os":
        # one-shot: the R budget of all rounds in one phase, one mask phase
        big = replace(schedule, model_iters=schedule.rounds * schedule.model_iters)
        state.round_idx = 1
        alternate_round(state, prepared, big)
        binarize_and_log(state, target)
        state.last_val_mae = val_mae(state, prepared)
        tail = schedule.theta_budget() - schedule.rounds * schedule.model_iters
        _theta_only(state, prepared, schedule, tail)
    else:  # dst: constant sparsity after a dense warmup
        state.round_idx = 1
        alternate_round(state, prepared, schedule)
        binarize_and_log(state, target)
        state.last_val_mae = val_mae(state, prepared)
        dst_finetune(state, prepared, schedule,
                     exchanges=schedule.rounds * schedule.dst_steps)
        tail = (schedule.rounds - 1) * schedule.model_iters + schedule.finetune_iters
        _theta_only(state, prepared, schedule, tail)

    state.last_val_mae = val_mae(state, prepared)
    if state.trace:
        last = state.trace[-1]
        state.trace[-1] = last[:4] + (state.last_val_mae,)
    achieved = state.current_sparsity()
    if achieved < target - 1.0 / u:
        raise ScheduleError(f"run ended at sparsity {achieved:.4f} below target {target}")
    return state.model, state.mask, state.trace


def binarize_and_log(state: TrainState, frac: float) -> SensorMask:
    new_mask = mk.binarize_prune(state.mask, frac)
    state.mask = new_mask
    state.trace.append((state.step, state.round_idx, mk.sparsity(new_mask),
                        state.loss_history[-1] if state.loss_history else float("nan"),
                        state.last_val_mae))
    return new_mask


def train_dense(model, dataset_or_prepared, schedule: Schedule, patch: int = 1):
    """Model-only training with an all-active mask, on the same total budget
    as a sparse run; the dense baseline for epsilon comparisons."""
    prepared = dataset_or_prepared if isinstance(dataset_or_prepared, PreparedData) \
        else prepare(dataset_or_prepared, patch)
    state = TrainState(model=model,
                       mask=mk.init_mask(prepared.unit_count, prepared.unit_rows),
                       rng=np.random.default_rng(schedule.seed))
    state.last_val_mae = val_mae(state, prepared)
    _theta_only(state, prepared, schedule, schedule.theta_budget())
    state.last_val_mae = val_mae(state, prepared)
    return state.model, state.mask, state.trace


def write_trace(trace, path) -> None:
    lines = ["# step,round,sparsity,train_loss,val_mae"]
    for step, rnd, sp, loss, vm in trace:
        lines.append(f"{step},{rnd},{sp:.17g},{loss:.17g},{vm:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace(path):
    rows = []
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            step, rnd, sp, loss, vm = ln.split(",")
            rows.append((int(step), int(rnd), float(sp), float(loss), float(vm)))
    return rows
