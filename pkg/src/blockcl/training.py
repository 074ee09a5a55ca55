"""Sequence training: warm-up scoring, subspace selection, expert evolution,
freezing, composite-objective optimization, and anchor updates, plus the
sequential fine-tuning and uniform-penalty baselines.

The composite objective is the data negative log-likelihood under the
routed superposition plus the elastic anchoring penalty
``lambda * sum_j n_j ||delta_j - anchor_j||_F^2`` over shared blocks.
During a task's optimization the current task's unique expert is pinned
into every sample's active set (its zero-initialized gate row would
otherwise have to win routing before it ever received gradient); routing
at evaluation time is fully content-based with no task information.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import IndexSet, SelectionConfig, score_blocks, select_topk, write_trace
from .evolution import SosThresholds, form_experts
from .experts import Registry, save_registry
from .gating import GateState, route_matrix
from .metrics import AccuracyMatrix, CapacityLedger
from .model import (
    BaseModel,
    NumericError,
    SuperposedModel,
    cross_entropy,
    finite_diff_check,
    squared_error,
)
from .rng import substream
from .tasks import TaskData


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    lr_warmup_fraction: float = 0.2
    selection_warmup_fraction: float = 0.2
    epochs_per_task: int = 40
    batch_size: int = 16
    anchor_lambda: float = 0.1
    seed: int = 7
    optimizer: str = "sgd"        # "sgd" | "momentum"
    momentum: float = 0.9

    def __post_init__(self) -> None:
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be positive and finite")
        for name in ("lr_warmup_fraction", "selection_warmup_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.epochs_per_task < 1 or self.batch_size < 1:
            raise ConfigError("epochs_per_task and batch_size must be >= 1")
        if self.anchor_lambda < 0 or not np.isfinite(self.anchor_lambda):
            raise ConfigError("anchor_lambda must be >= 0 and finite")
        if self.optimizer not in ("sgd", "momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class Geometry:
    dim: int = 32
    n_layers: int = 2
    n_classes: int = 4
    block_size: int = 4

    def make_base(self, seed: int) -> BaseModel:
        return BaseModel.create(self.dim, self.n_layers, self.n_classes,
                                self.block_size, substream(seed, "init"))


@dataclass
class SplitAudit:
    """Snapshot of gate rows taken at one split, for invariance checks."""

    task_id: int
    parent_id: int
    child_ids: tuple
    parent_row: np.ndarray
    child_rows: dict


@dataclass
class TaskReport:
    task_id: int
    selection: IndexSet
    selection_scores: dict
    frozen_checksums_before: dict
    frozen_checksums_after: dict
    grad_check_error: float | None
    walltime_s: float


@dataclass
class SequenceResult:
    matrix: AccuracyMatrix
    ledger: CapacityLedger
    registry: Registry
    gate: GateState
    base: BaseModel
    manifest: dict
    trace_lines: list = field(default_factory=list)
    routing_audit: list = field(default_factory=list)   # csv rows (str)
    split_audit: list = field(default_factory=list)
    task_reports: list = field(default_factory=list)


# -- composite objective ------------------------------------------------------

def anchor_penalty_and_grads(registry: Registry, lam: float) -> tuple[float, dict]:
    """Elastic anchoring penalty over shared blocks and its delta gradients."""
    shared = registry.shared()
    if lam == 0.0 or shared is None:
        return 0.0, {}
    penalty = 0.0
    grads: dict = {}
    for coord in sorted(shared.owned):
        diff = shared.deltas[coord] - shared.anchors[coord]
        n_j = shared.share_count[coord]
        penalty += lam * n_j * float(np.sum(diff * diff))
        grads[(shared.expert_id, coord)] = 2.0 * lam * n_j * diff
    return penalty, grads


def composite_loss(
    X: np.ndarray,
    y: np.ndarray,
    engine: SuperposedModel,
    registry: Registry,
    gate: GateState,
    lam: float,
    trainable_ids: tuple,
    kind: str = "classification",
    pin: int | None = None,
    routing=None,
):
    """Loss and gradients for one batch under the routed superposition.

    Returns (loss, block_grads, gate_grads, routing) where ``block_grads``
    maps (expert_id, coord) -> gradient array for trainable experts only
    (frozen coordinates are never accumulated) and ``gate_grads`` is an
    (N, dim) array aligned with the routing's expert order.  ``routing``
    may be passed in to pin the active sets (the finite-difference oracle
    does this so it probes the same smooth branch the analytic gradients
    describe).
    """
    if routing is None:
        routing = route_matrix(gate, X, pin=pin)
        weights = routing.weights
    else:
        # recompute mixture weights from current rows over the pinned active sets
        R = gate.row_matrix()
        logits = np.atleast_2d(X) @ R.T
        shifted = np.where(routing.active_mask, logits, -np.inf)
        mx = shifted.max(axis=1, keepdims=True)
        e = np.exp(shifted - mx)
        weights = e / e.sum(axis=1, keepdims=True)
        routing = type(routing)(ids=routing.ids, logits=logits,
                                weights_all=routing.weights_all,
                                active_mask=routing.active_mask, weights=weights)

    id_to_pos = {eid: j for j, eid in enumerate(routing.ids)}
    overlays = [(weights[:, j], registry.get(eid).deltas) for j, eid in enumerate(routing.ids)]
    out = engine.forward(overlays, X, record=True)

    if kind == "classification":
        data_loss, dL_dout = cross_entropy(out, y)
    else:
        data_loss, dL_dout = squared_error(out[:, :1], y)
        pad = np.zeros_like(out)
        pad[:, :1] = dL_dout
        dL_dout = pad

    active = {
        id_to_pos[eid]: frozenset(registry.get(eid).owned)
        for eid in trainable_ids
        if eid in id_to_pos and registry.get(eid).owned
    }
    bundle = engine.backward(dL_dout, active=active, want_weight_grads=True)

    block_grads: dict = {}
    for (pos, coord), g in bundle.block_grads.items():
        block_grads[(routing.ids[pos], coord)] = g

    penalty, pgrads = anchor_penalty_and_grads(registry, lam)
    for key, g in pgrads.items():
        if key in block_grads:
            block_grads[key] = block_grads[key] + g
        else:
            block_grads[key] = g.copy()

    # chain per-sample mixture-weight gradients through the active softmax
    wg = bundle.weight_grads
    inner = np.sum(weights * wg, axis=1, keepdims=True)
    g_z = weights * (wg - inner)            # zero at inactive positions
    gate_grads = g_z.T @ np.atleast_2d(X)   # (N, dim)

    loss = data_loss + penalty
    if not np.isfinite(loss):
        raise NumericError(f"non-finite composite loss (data={data_loss}, penalty={penalty})")
    return loss, block_grads, gate_grads, routing


# -- parameter flattening (finite-difference oracle support) ------------------

def flatten_trainables(registry: Registry, gate: GateState, trainable_ids: tuple):
    """Pack trainable delta blocks and all gate rows into one flat vector."""
    layout = []
    pieces = []
    offset = 0
    for eid in trainable_ids:
        e = registry.get(eid)
        for coord in sorted(e.owned):
            block = e.deltas[coord]
            layout.append(("block", eid, coord, block.shape, offset, offset + block.size))
            pieces.append(block.ravel())
            offset += block.size
    for eid in gate.live_ids():
        row = gate.rows[eid]
        layout.append(("gate", eid, None, row.shape, offset, offset + row.size))
        pieces.append(row.ravel())
        offset += row.size
    theta = np.concatenate(pieces) if pieces else np.zeros(0)
    return theta, layout


def write_trainables(registry: Registry, gate: GateState, layout, theta: np.ndarray) -> None:
    for kind, eid, coord, shape, lo, hi in layout:
        value = theta[lo:hi].reshape(shape)
        if kind == "block":
            registry.get(eid).deltas[coord] = value.copy()
        else:
            gate.rows[eid] = value.copy()


def gather_gradients(layout, block_grads: dict, gate_grads: np.ndarray, ids: tuple) -> np.ndarray:
    pos = {eid: j for j, eid in enumerate(ids)}
    out = np.zeros(layout[-1][5] if layout else 0)
    for kind, eid, coord, shape, lo, hi in layout:
        if kind == "block":
            g = block_grads.get((eid, coord))
            if g is not None:
                out[lo:hi] = g.ravel()
        else:
            out[lo:hi] = gate_grads[pos[eid]].ravel()
    return out


def check_composite_gradients(task_x, task_y, engine, registry, gate, lam,
                              trainable_ids, kind="classification",
                              pin=None, step=1e-5) -> float:
    """Finite-difference verification of the composite objective's gradients.

    The routing decisions are pinned at the base point so the probe walks
    the same smooth branch the analytic gradients describe (top-k selection
    is piecewise constant).
    """
    loss0, block_grads, gate_grads, routing = composite_loss(
        task_x, task_y, engine, registry, gate, lam, trainable_ids, kind=kind, pin=pin)
    theta0, layout = flatten_trainables(registry, gate, trainable_ids)
    analytic = gather_gradients(layout, block_grads, gate_grads, routing.ids)

    def f(theta: np.ndarray) -> float:
        write_trainables(registry, gate, layout, theta)
        try:
            loss, _, _, _ = composite_loss(
                task_x, task_y, engine, registry, gate, lam, trainable_ids,
                kind=kind, routing=routing)
        finally:
            write_trainables(registry, gate, layout, theta0)
        return loss

    err = finite_diff_check(f, theta0, analytic, step=step)
    write_trainables(registry, gate, layout, theta0)
    return err


# -- the sequence loop --------------------------------------------------------

def _warmup_gradient(engine: SuperposedModel, registry: Registry, gate: GateState,
                     data: TaskData, config: TrainConfig, pin: int | None):
    """Mean dense base-weight gradient over the warm-up slice of the task."""
    n = data.train_x.shape[0]
    n_batches = max(1, int(np.ceil(n / config.batch_size)))
    n_warm = max(1, round(config.selection_warmup_fraction * n_batches))
    grid = engine.grid
    acc = [np.zeros(dims) for dims in grid.layer_dims]
    for b in range(n_warm):
        lo, hi = b * config.batch_size, min((b + 1) * config.batch_size, n)
        if lo >= n:
            break
        X, y = data.train_x[lo:hi], data.train_y[lo:hi]
        if registry.experts:
            routing = route_matrix(gate, X, pin=pin)
            overlays = [(routing.weights[:, j], registry.get(eid).deltas)
                        for j, eid in enumerate(routing.ids)]
        else:
            overlays = []
        out = engine.forward(overlays, X, record=True)
        if data.spec.kind == "classification":
            _, dL_dout = cross_entropy(out, y)
        else:
            _, dL = squared_error(out[:, :1], y)
            dL_dout = np.zeros_like(out)
            dL_dout[:, :1] = dL
        bundle = engine.backward(dL_dout, active={}, want_base_grads=True)
        for i, g in enumerate(bundle.base_grads):
            acc[i] += g
    return [g / n_warm for g in acc]


def _sgd_step(registry, gate, block_grads, gate_grads, ids, lr, config, velocity):
    mu = config.momentum if config.optimizer == "momentum" else 0.0
    for (eid, coord), g in sorted(block_grads.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        e = registry.get(eid)
        if mu > 0.0:
            v = velocity.setdefault(("block", eid, coord), np.zeros_like(g))
            v *= mu
            v += g
            g = v
        e.deltas[coord] = e.deltas[coord] - lr * g
    pos = {eid: j for j, eid in enumerate(ids)}
    for eid in gate.live_ids():
        g = gate_grads[pos[eid]]
        if mu > 0.0:
            v = velocity.setdefault(("gate", eid), np.zeros_like(g))
            v *= mu
            v += g
            g = v
        gate.rows[eid] = gate.rows[eid] - lr * g


def _optimize_task(engine, registry, gate, data: TaskData, config: TrainConfig,
                   task_id: int, trainable_ids: tuple, pin: int | None) -> None:
    n = data.train_x.shape[0]
    shuffle_rng = substream(config.seed, f"shuffle/{task_id}")
    n_batches = max(1, int(np.ceil(n / config.batch_size)))
    total_steps = config.epochs_per_task * n_batches
    warm_steps = max(1, round(config.lr_warmup_fraction * total_steps))
    velocity: dict = {}
    step = 0
    for _epoch in range(config.epochs_per_task):
        perm = shuffle_rng.permutation(n)
        for b in range(n_batches):
            sel = perm[b * config.batch_size:(b + 1) * config.batch_size]
            if sel.size == 0:
                continue
            lr = config.learning_rate * min(1.0, (step + 1) / warm_steps)
            try:
                _, block_grads, gate_grads, routing = composite_loss(
                    data.train_x[sel], data.train_y[sel], engine, registry, gate,
                    config.anchor_lambda, trainable_ids, kind=data.spec.kind, pin=pin)
            except NumericError as exc:
                raise NumericError(f"task {task_id} epoch {_epoch} batch {b}: {exc}") from exc
            _sgd_step(registry, gate, block_grads, gate_grads, routing.ids, lr, config, velocity)
            step += 1


def evaluate_routed(engine, registry, gate, X, y, kind="classification") -> float:
    """Task-free accuracy in percent (classification only)."""
    if kind != "classification":
        raise ConfigError("sequence evaluation is defined for classification tasks")
    routing = route_matrix(gate, X)
    overlays = [(routing.weights[:, j], registry.get(eid).deltas)
                for j, eid in enumerate(routing.ids)]
    out = engine.forward(overlays, X)
    pred = np.argmax(out, axis=1)
    return 100.0 * float(np.mean(pred == y))


def _audit_rows(prefix: str, routing, limit: int | None = None) -> list:
    rows = []
    B = routing.logits.shape[0]
    if limit is not None:
        B = min(B, limit)
    for b in range(B):
        for j, eid in enumerate(routing.ids):
            rows.append(
                f"{prefix}_{b},{eid},{routing.logits[b, j]!r},"
                f"{routing.weights_all[b, j]!r},{int(routing.active_mask[b, j])}"
            )
    return rows


def run_task(state: "SequenceState", data: TaskData, task_id: int) -> TaskReport:
    """One pass of the per-task procedure; mutates the sequence state."""
    if data.train_x.shape[0] == 0:
        raise ConfigError(f"task {task_id} has no training data")
    t0 = time.perf_counter()
    engine, registry, gate = state.engine, state.registry, state.gate
    config = state.config

    prev_unique = registry.unique_for_task(task_id - 1) if task_id > 1 else None
    warm_pin = prev_unique.expert_id if prev_unique is not None else None
    mean_grads = _warmup_gradient(engine, registry, gate, data, config, pin=warm_pin)
    scores = score_blocks(mean_grads, engine.grid)
    selection = select_topk(scores, state.select_cfg, state.eligible_layers)

    if task_id == 1:
        expert = registry.init_first_task(selection)
        gate.register_new_expert(expert.expert_id)
        new_id = expert.expert_id
    else:
        report = form_experts(registry, task_id, selection, state.thresholds)
        for event in report.split_events:
            parent_row = gate.rows[event.parent_id].copy()
            gate.expand_on_split(event.parent_id, event.children())
            state.split_audit.append(SplitAudit(
                task_id=task_id, parent_id=event.parent_id, child_ids=event.children(),
                parent_row=parent_row,
                child_rows={c: gate.rows[c].copy() for c in event.children()},
            ))
        gate.register_new_expert(report.new_expert_id)
        new_id = report.new_expert_id

    registry.freeze_history(task_id)
    registry.validate()

    frozen_before = {e.expert_id: e.delta_checksum() for e in registry.experts if e.frozen}

    trainable_ids = tuple(
        e.expert_id for e in registry.experts
        if not e.frozen and (e.kind == "shared" or e.task_id == task_id)
    )
    grad_err = None
    if state.grad_check_batch:
        bs = min(config.batch_size, data.train_x.shape[0])
        grad_err = check_composite_gradients(
            data.train_x[:bs], data.train_y[:bs], engine, registry, gate,
            config.anchor_lambda, trainable_ids, kind=data.spec.kind, pin=new_id)

    _optimize_task(engine, registry, gate, data, config, task_id, trainable_ids, pin=new_id)

    shared = registry.shared()
    if shared is not None:
        registry.set_anchors(shared)

    frozen_after = {e.expert_id: e.delta_checksum() for e in registry.experts if e.frozen}

    total, shared_count, unique = registry.capacity_snapshot()
    state.ledger.add(step=task_id, task_added=f"T{task_id}", total=total, shared=shared_count,
                     unique=[unique.get(k, 0) for k in range(1, task_id + 1)])

    trace = []
    import io as _io
    buf = _io.StringIO()
    write_trace(buf, task_id, selection, scores)
    trace.append(buf.getvalue())
    state.trace_lines.extend(trace)

    return TaskReport(task_id=task_id, selection=selection, selection_scores=scores,
                      frozen_checksums_before=frozen_before,
                      frozen_checksums_after=frozen_after,
                      grad_check_error=grad_err,
                      walltime_s=time.perf_counter() - t0)


@dataclass
class SequenceState:
    base: BaseModel
    engine: SuperposedModel
    registry: Registry
    gate: GateState
    config: TrainConfig
    select_cfg: SelectionConfig
    thresholds: SosThresholds
    eligible_layers: tuple | None = None
    grad_check_batch: bool = True
    ledger: CapacityLedger = field(default_factory=CapacityLedger)
    trace_lines: list = field(default_factory=list)
    split_audit: list = field(default_factory=list)


def run_sequence(task_datas: list, config: TrainConfig, geometry: Geometry,
                 select_cfg: SelectionConfig, thresholds: SosThresholds,
                 top_k: int = 2, base: BaseModel | None = None,
                 grad_check: bool = True) -> SequenceResult:
    """Train the expert method over a task sequence and fill the matrix."""
    if not task_datas:
        raise ConfigError("need at least one task")
    wall0 = time.perf_counter()
    base = base if base is not None else geometry.make_base(config.seed)
    engine = SuperposedModel(base)
    registry = Registry(grid=engine.grid)
    gate = GateState(dim=geometry.dim, top_k=top_k)
    state = SequenceState(base=base, engine=engine, registry=registry, gate=gate,
                          config=config, select_cfg=select_cfg, thresholds=thresholds,
                          grad_check_batch=grad_check)
    base_checksum = base.checksum()

    matrix = AccuracyMatrix.empty([f"T{d.spec.task_id}" for d in task_datas])
    routing_audit: list = ["sample_id,expert_id,logit,softmax_weight,active_flag"]
    reports = []
    for t, data in enumerate(task_datas, start=1):
        report = run_task(state, data, t)
        reports.append(report)
        for j in range(1, t + 1):
            prior = task_datas[j - 1]
            acc = evaluate_routed(engine, registry, gate, prior.eval_x, prior.eval_y,
                                  kind=prior.spec.kind)
            matrix.set(t, j, acc)
            routing = route_matrix(gate, prior.eval_x)
            routing_audit.extend(_audit_rows(f"t{t}_eval{j}", routing, limit=25))

    if base.checksum() != base_checksum:
        raise NumericError("base model mutated during the run")

    manifest = {
        "run.method": "smoe",
        "run.tasks": len(task_datas),
        "run.walltime_s": round(time.perf_counter() - wall0, 4),
        "run.base_checksum": base_checksum,
        "geometry.dim": geometry.dim,
        "geometry.layers": geometry.n_layers,
        "geometry.classes": geometry.n_classes,
        "geometry.block_size": geometry.block_size,
        "select.budget": select_cfg.budget,
        "select.tau_block": select_cfg.tau_block,
        "select.tie_break": select_cfg.tie_break,
        "split.tau_ect": thresholds.tau_ect,
        "split.tau_trt": thresholds.tau_trt,
        "gate.top_k": top_k,
        "train.lr": config.learning_rate,
        "train.lr_warmup_fraction": config.lr_warmup_fraction,
        "train.selection_warmup_fraction": config.selection_warmup_fraction,
        "train.epochs": config.epochs_per_task,
        "train.batch": config.batch_size,
        "train.lambda": config.anchor_lambda,
        "train.seed": config.seed,
        "train.optimizer": config.optimizer,
        "registry.experts": len(registry.experts),
        "registry.shared_blocks": registry.capacity_snapshot()[1],
        "registry.total_blocks": registry.capacity_snapshot()[0],
    }
    for r in reports:
        manifest[f"task.{r.task_id}.selection_size"] = len(r.selection)
        manifest[f"task.{r.task_id}.walltime_s"] = round(r.walltime_s, 4)
        if r.grad_check_error is not None:
            manifest[f"task.{r.task_id}.grad_check_error"] = r.grad_check_error

    return SequenceResult(matrix=matrix, ledger=state.ledger, registry=registry,
                          gate=gate, base=base, manifest=manifest,
                          trace_lines=state.trace_lines, routing_audit=routing_audit,
                          split_audit=state.split_audit, task_reports=reports)


# -- baselines ----------------------------------------------------------------

@dataclass
class BaselineResult:
    matrix: AccuracyMatrix
    delta: dict
    base: BaseModel
    manifest: dict
    trace_lines: list = field(default_factory=list)


def _baseline_run(task_datas: list, config: TrainConfig, geometry: Geometry,
                  select_cfg: SelectionConfig, ewc_lambda: float | None,
                  base: BaseModel | None = None) -> BaselineResult:
    """Shared loop for sequential fine-tuning and its uniform-penalty variant.

    One mutable overlay, no experts, no freezing: each task re-selects a
    subspace with the same warm-up machinery and trains those blocks.  With
    ``ewc_lambda`` set, updates are pulled toward the previous task's final
    weights by a uniform quadratic penalty.
    """
    if not task_datas:
        raise ConfigError("need at least one task")
    wall0 = time.perf_counter()
    base = base if base is not None else geometry.make_base(config.seed)
    engine = SuperposedModel(base)
    grid = engine.grid
    delta: dict = {}
    matrix = AccuracyMatrix.empty([f"T{d.spec.task_id}" for d in task_datas])
    trace_lines: list = []
    method = "seq" if not ewc_lambda else "ewc"

    for t, data in enumerate(task_datas, start=1):
        if data.train_x.shape[0] == 0:
            raise ConfigError(f"task {t} has no training data")
        n = data.train_x.shape[0]
        n_batches = max(1, int(np.ceil(n / config.batch_size)))
        n_warm = max(1, round(config.selection_warmup_fraction * n_batches))
        acc_g = [np.zeros(dims) for dims in grid.layer_dims]
        for b in range(n_warm):
            lo, hi = b * config.batch_size, min((b + 1) * config.batch_size, n)
            if lo >= n:
                break
            out = engine.forward([(1.0, delta)], data.train_x[lo:hi], record=True)
            if data.spec.kind == "classification":
                _, dL_dout = cross_entropy(out, data.train_y[lo:hi])
            else:
                _, dL = squared_error(out[:, :1], data.train_y[lo:hi])
                dL_dout = np.zeros_like(out)
                dL_dout[:, :1] = dL
            bundle = engine.backward(dL_dout, active={}, want_base_grads=True)
            for i, g in enumerate(bundle.base_grads):
                acc_g[i] += g
        scores = score_blocks([g / n_warm for g in acc_g], grid)
        selection = select_topk(scores, select_cfg)
        import io as _io
        buf = _io.StringIO()
        write_trace(buf, t, selection, scores)
        trace_lines.append(buf.getvalue())

        for coord in sorted(selection):
            if coord not in delta:
                rs, cs = grid.block_slices(coord)
                delta[coord] = np.zeros((rs.stop - rs.start, cs.stop - cs.start))
        anchors = {c: delta[c].copy() for c in sorted(selection)} if ewc_lambda else {}

        shuffle_rng = substream(config.seed, f"shuffle/{t}")
        total_steps = config.epochs_per_task * n_batches
        warm_steps = max(1, round(config.lr_warmup_fraction * total_steps))
        velocity: dict = {}
        step = 0
        for _epoch in range(config.epochs_per_task):
            perm = shuffle_rng.permutation(n)
            for b in range(n_batches):
                sel = perm[b * config.batch_size:(b + 1) * config.batch_size]
                if sel.size == 0:
                    continue
                lr = config.learning_rate * min(1.0, (step + 1) / warm_steps)
                out = engine.forward([(1.0, delta)], data.train_x[sel], record=True)
                if data.spec.kind == "classification":
                    loss, dL_dout = cross_entropy(out, data.train_y[sel])
                else:
                    loss, dL = squared_error(out[:, :1], data.train_y[sel])
                    dL_dout = np.zeros_like(out)
                    dL_dout[:, :1] = dL
                if not np.isfinite(loss):
                    raise NumericError(f"baseline {method}: non-finite loss at task {t}")
                bundle = engine.backward(dL_dout, active={0: frozenset(selection)})
                mu = config.momentum if config.optimizer == "momentum" else 0.0
                for coord in sorted(selection):
                    g = bundle.block_grad(0, coord)
                    if ewc_lambda:
                        g = g + 2.0 * ewc_lambda * (delta[coord] - anchors[coord])
                    if mu > 0.0:
                        v = velocity.setdefault(coord, np.zeros_like(g))
                        v *= mu
                        v += g
                        g = v
                    delta[coord] = delta[coord] - lr * g
                step += 1

        for j in range(1, t + 1):
            prior = task_datas[j - 1]
            if prior.spec.kind != "classification":
                raise ConfigError("sequence evaluation is defined for classification tasks")
            out = engine.forward([(1.0, delta)], prior.eval_x)
            pred = np.argmax(out, axis=1)
            matrix.set(t, j, 100.0 * float(np.mean(pred == prior.eval_y)))

    manifest = {
        "run.method": method,
        "run.tasks": len(task_datas),
        "run.walltime_s": round(time.perf_counter() - wall0, 4),
        "train.seed": config.seed,
        "train.lr": config.learning_rate,
        "train.epochs": config.epochs_per_task,
        "train.batch": config.batch_size,
    }
    if ewc_lambda:
        manifest["train.ewc_lambda"] = ewc_lambda
    return BaselineResult(matrix=matrix, delta=delta, base=base, manifest=manifest,
                          trace_lines=trace_lines)


def baseline_seq_train(task_datas: list, config: TrainConfig, geometry: Geometry,
                       select_cfg: SelectionConfig, base: BaseModel | None = None) -> BaselineResult:
    """Plain sequential fine-tuning of one mutable sparse overlay."""
    return _baseline_run(task_datas, config, geometry, select_cfg, ewc_lambda=None, base=base)


def baseline_ewc_lite(task_datas: list, config: TrainConfig, geometry: Geometry,
                      select_cfg: SelectionConfig, ewc_lambda: float,
                      base: BaseModel | None = None) -> BaselineResult:
    """Sequential fine-tuning with a uniform quadratic pull to the last task."""
    if ewc_lambda < 0:
        raise ConfigError("ewc_lambda must be >= 0")
    return _baseline_run(task_datas, config, geometry, select_cfg,
                         ewc_lambda=ewc_lambda or None, base=base)


def manifest_text(manifest: dict) -> str:
    return "".join(f"{k} = {manifest[k]}\n" for k in sorted(manifest))
