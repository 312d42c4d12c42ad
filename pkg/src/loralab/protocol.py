"""The continual-learning driver.

Per task: create a head and one adapter per unfrozen location, minimize
cross-entropy plus the weighted orthogonality penalty with Adam, accumulate
importance statistics each step, then seal the adapters, snapshot the
composition weights, fit class statistics, and freeze the most important
locations. Inference is two-stage: Mahalanobis nearest-class-mean under the
first task's extractor picks a task id, whose snapshot extractor feeds the
jointly adjusted classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lorac
from .data import Dataset, TaskSplit, make_batches
from .errors import DataError, ProtocolError, UsageError
from .ipc import FreezeSet, ImportanceTracker, IpcConfig, accumulate_step, matrix_scores, select_freeze_set
from .linalg import covariance, gaussian_sample, mahalanobis_sq_many
from .metrics import AccuracyMatrix
from .netcore import AdamState, Backbone, HeadBank, adam_step, ce_forward_backward, forward
from .rng import RngStream

# Stream purpose codes; every consumer of randomness owns a spawned stream.
S_DATA = 10
S_PRETEXT_DATA = 11
S_PRETEXT_TRAIN = 12
S_BACKBONE = 13
S_ADAPTER = 20
S_BATCH = 21
S_TAP_SAMPLE = 22
S_TAP_BATCH = 23

__all__ = [
    "TrainSettings",
    "TaskSnapshot",
    "ClassStats",
    "RunState",
    "init_run_state",
    "train_task",
    "fit_task_stats",
    "adjust_classifier",
    "infer_task_id",
    "predict",
    "evaluate_matrix",
    "total_loss_and_grads",
    "trainable_params",
]


@dataclass
class TrainSettings:
    """Everything the driver needs to run one task stream."""

    lr: float = 0.01
    lr_hist_ratio: float = 0.01
    ortho_weight: float = 1.0
    epochs: int = 10
    batch_size: int = 128
    rank: int = 4
    tap_samples: int = 256
    tap_epochs: int = 20
    tii_mode: str = "per_sample"  # or "batch"
    shrinkage: float = 1e-3
    shrinkage_mode: str = "relative"  # eps = shrinkage * tr(Sigma)/D, or "absolute"
    omega_current_rate: str = "main"  # learning-rate class of the newest omega entry
    composition: bool = True
    ortho: bool = True
    ipc: bool = True
    tii: bool = True


@dataclass
class TaskSnapshot:
    """Composition weights as they stood when a task finished.

    Together with the (immutable once sealed) adapters this reproduces the
    effective weights of that moment byte for byte.
    """

    task_id: int
    omega: dict[str, np.ndarray]
    n_adapters: dict[str, int]
    frozen: frozenset[str]


@dataclass
class ClassStats:
    """Per-class statistics under two extractors.

    ``mu``/``sigma`` live in the first task's feature space and drive task-ID
    inference; ``mu_hat``/``var_hat`` live in the owning task's feature space
    and parameterize the pseudo-feature sampler.
    """

    class_id: int
    task_id: int
    mu: np.ndarray
    sigma: np.ndarray
    mu_hat: np.ndarray
    var_hat: np.ndarray


@dataclass
class RunState:
    backbone: Backbone
    stacks: dict[str, lorac.LoraStack]
    bases: dict[str, lorac.OrthoBasis]
    heads: HeadBank
    settings: TrainSettings
    ipc_cfg: IpcConfig
    rng: RngStream
    completed: list[int] = field(default_factory=list)
    snapshots: dict[int, TaskSnapshot] = field(default_factory=dict)
    class_stats: dict[int, ClassStats] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)
    freeze_history: list[FreezeSet] = field(default_factory=list)
    importance_history: dict[int, dict[str, float]] = field(default_factory=dict)
    weights_by_task: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    ortho_trace: dict[int, dict[str, tuple[float, float]]] = field(default_factory=dict)
    steps_by_task: dict[int, int] = field(default_factory=dict)
    samples_by_task: dict[int, int] = field(default_factory=dict)
    adjusted: bool = False

    @property
    def locations(self) -> list[str]:
        return list(self.stacks)


def init_run_state(
    backbone: Backbone,
    settings: TrainSettings,
    ipc_cfg: IpcConfig,
    rng: RngStream,
) -> RunState:
    stacks = {}
    bases = {}
    for i, block in enumerate(backbone.blocks):
        loc = f"block{i}.w"
        stacks[loc] = lorac.LoraStack(location=loc, block_index=i, base=block.weight)
        bases[loc] = lorac.OrthoBasis()
    return RunState(
        backbone=backbone,
        stacks=stacks,
        bases=bases,
        heads=HeadBank(),
        settings=settings,
        ipc_cfg=ipc_cfg.validate(),
        rng=rng,
    )


def _local_labels(head, y) -> np.ndarray:
    y = np.asarray(y)
    local = np.searchsorted(head.classes, y)
    bad = (local >= head.classes.size) | (head.classes[np.minimum(local, head.classes.size - 1)] != y)
    if bad.any():
        raise DataError(f"labels {np.unique(y[bad]).tolist()} not in task {head.task_id}'s classes")
    return local


def current_layers(state: RunState) -> list[tuple[np.ndarray, np.ndarray, str]]:
    """Effective (weight, bias, activation) triples under the live stacks."""
    layers = []
    for i, block in enumerate(state.backbone.blocks):
        w = lorac.compose_effective(state.stacks[f"block{i}.w"])
        layers.append((w, block.bias, block.activation))
    return layers


def snapshot_layers(state: RunState, task_id: int) -> list[tuple[np.ndarray, np.ndarray, str]]:
    """Effective layers reconstructed from a task snapshot."""
    if task_id not in state.snapshots:
        raise UsageError(f"no snapshot for task {task_id}")
    snap = state.snapshots[task_id]
    layers = []
    for i, block in enumerate(state.backbone.blocks):
        loc = f"block{i}.w"
        stack = state.stacks[loc]
        count = snap.n_adapters[loc]
        omega = snap.omega[loc]
        acc = np.zeros_like(stack.base)
        for tau in range(count):
            acc += omega[tau] * stack.adapters[tau].delta()
        layers.append((stack.base + acc, block.bias, block.activation))
    return layers


@dataclass
class _StepResult:
    loss: float
    ce_loss: float
    ortho_losses: dict[str, float]
    grads: dict[str, np.ndarray]
    w_eff: dict[str, np.ndarray]
    d_w_eff: dict[str, np.ndarray]
    features: np.ndarray


def total_loss_and_grads(state: RunState, head, x, y_local) -> _StepResult:
    """One evaluation of the fine-tuning objective and all its gradients.

    Loss is mean cross-entropy plus ortho_weight times the summed per-location
    orthonormality penalties. Gradient keys: ``<loc>.a``, ``<loc>.b``,
    ``<loc>.omega`` for unfrozen locations plus ``head.w``/``head.b``;
    ``d_w_eff`` carries the raw cross-entropy gradient on each effective
    matrix for the importance tracker.
    """
    s = state.settings
    layers = []
    w_eff = {}
    for i, block in enumerate(state.backbone.blocks):
        loc = f"block{i}.w"
        w = lorac.compose_effective(state.stacks[loc])
        w_eff[loc] = w
        layers.append((w, block.bias, block.activation))

    ce = ce_forward_backward(layers, head.w, head.b, x, y_local)
    grads: dict[str, np.ndarray] = {"head.w": ce.d_head_w, "head.b": ce.d_head_b}
    d_w_eff = {}
    ortho_losses: dict[str, float] = {}
    loss = ce.loss
    for i in range(len(state.backbone.blocks)):
        loc = f"block{i}.w"
        d_w_eff[loc] = ce.d_weights[i]
        stack = state.stacks[loc]
        if stack.frozen or not stack.adapters or not stack.adapters[-1].trainable:
            continue
        d_a, d_b, d_omega = lorac.factor_grads(stack, ce.d_weights[i])
        if s.ortho:
            oloss, ograd = lorac.ortho_loss_and_grad(stack, state.bases[loc])
            ortho_losses[loc] = oloss
            loss += s.ortho_weight * oloss
            d_a = d_a + s.ortho_weight * ograd
        grads[f"{loc}.a"] = d_a
        grads[f"{loc}.b"] = d_b
        grads[f"{loc}.omega"] = d_omega
    return _StepResult(
        loss=loss,
        ce_loss=ce.loss,
        ortho_losses=ortho_losses,
        grads=grads,
        w_eff=w_eff,
        d_w_eff=d_w_eff,
        features=ce.features,
    )


def trainable_params(state: RunState, head) -> dict[str, np.ndarray]:
    """Live arrays of everything the current task trains."""
    params: dict[str, np.ndarray] = {"head.w": head.w, "head.b": head.b}
    for loc, stack in state.stacks.items():
        if stack.frozen or not stack.adapters or not stack.adapters[-1].trainable:
            continue
        adapter = stack.adapters[-1]
        params[f"{loc}.a"] = adapter.a
        params[f"{loc}.b"] = adapter.b
        if state.settings.composition:
            params[f"{loc}.omega"] = stack.omega
    return params


def begin_task(state: RunState, split: TaskSplit):
    """Create the task's head, adapters, optimizer and importance tracker."""
    expected = len(state.completed) + 1
    if split.task_id != expected:
        raise ProtocolError(f"expected task {expected}, got {split.task_id}")
    s = state.settings
    head = state.heads.add_head(split.task_id, split.classes, state.backbone.feature_dim)

    for loc, stack in state.stacks.items():
        if stack.frozen:
            continue
        lorac.add_task_adapter(
            stack, split.task_id, s.rank, state.rng.spawn(S_ADAPTER, split.task_id, stack.block_index)
        )

    opt = AdamState(lr=s.lr)
    params = trainable_params(state, head)
    for name, p in params.items():
        if name.endswith(".omega"):
            lr = np.full(p.shape, s.lr * s.lr_hist_ratio)
            lr[-1] = s.lr if s.omega_current_rate == "main" else s.lr * s.lr_hist_ratio
            opt.register(name, p, lr=lr)
        else:
            opt.register(name, p)

    tracker = ImportanceTracker(task_id=split.task_id)
    return head, opt, tracker


def train_task(state: RunState, split: TaskSplit) -> None:
    """Train one task end to end and close it out (seal, snapshot, freeze)."""
    s = state.settings
    head, opt, tracker = begin_task(state, split)
    task = split.task_id

    steps = 0
    first_ortho: dict[str, float] = {}
    last_ortho: dict[str, float] = {}
    for epoch in range(s.epochs):
        batches = make_batches(split, s.batch_size, state.rng.spawn(S_BATCH, task, epoch))
        for bx, by in batches:
            res = total_loss_and_grads(state, head, bx, _local_labels(head, by))
            accumulate_step(tracker, res.w_eff, res.d_w_eff, state.ipc_cfg)
            step_grads = {k: v for k, v in res.grads.items() if k in opt.slots}
            adam_step(opt, trainable_params(state, head), step_grads)
            if not first_ortho:
                first_ortho = dict(res.ortho_losses)
            last_ortho = dict(res.ortho_losses)
            steps += 1

    for loc, stack in state.stacks.items():
        if not stack.frozen:
            state.bases[loc] = lorac.seal_task(stack, state.bases[loc])

    state.snapshots[task] = TaskSnapshot(
        task_id=task,
        omega={loc: stack.omega.copy() for loc, stack in state.stacks.items()},
        n_adapters={loc: len(stack.adapters) for loc, stack in state.stacks.items()},
        frozen=frozenset(state.frozen),
    )
    state.weights_by_task[task] = {
        loc: lorac.compose_effective(stack) for loc, stack in state.stacks.items()
    }
    state.completed.append(task)
    state.steps_by_task[task] = steps
    state.samples_by_task[task] = split.n_train
    state.ortho_trace[task] = {
        loc: (first_ortho.get(loc, 0.0), last_ortho.get(loc, 0.0)) for loc in last_ortho
    }

    fit_task_stats(state, split)

    scores = matrix_scores(tracker)
    state.importance_history[task] = scores
    if s.ipc:
        fs = select_freeze_set(scores, state.frozen, state.ipc_cfg, task_id=task)
        lorac.apply_freeze(state.stacks, fs.locations)
        state.frozen.update(fs.locations)
        state.freeze_history.append(fs)
    else:
        state.freeze_history.append(FreezeSet(task_id=task, locations=[], scores=[]))


def fit_task_stats(state: RunState, split: TaskSplit) -> None:
    """Class prototypes and covariances for the just-finished task.

    Full covariance under the first task's extractor (task-ID inference),
    mean and diagonal variance under the task's own extractor (pseudo
    features).
    """
    task = split.task_id
    if task not in state.snapshots or 1 not in state.snapshots:
        raise ProtocolError("fit_task_stats needs the task's snapshot and snapshot 1")
    f_first, _ = forward(snapshot_layers(state, 1), split.train_x)
    f_own, _ = forward(snapshot_layers(state, task), split.train_x)
    for c in split.classes:
        sel = split.train_y == c
        n = int(sel.sum())
        if n < 2:
            raise DataError(f"class {int(c)} has {n} samples; need at least 2")
        mu = f_first[sel].mean(axis=0, keepdims=True)
        sigma = covariance(f_first[sel], mu)
        mu_hat = f_own[sel].mean(axis=0, keepdims=True)
        var_hat = np.diag(covariance(f_own[sel], mu_hat))[None, :].copy()
        state.class_stats[int(c)] = ClassStats(
            class_id=int(c), task_id=task, mu=mu, sigma=sigma, mu_hat=mu_hat, var_hat=var_hat
        )


def pseudo_features(state: RunState, classes) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced Gaussian pseudo features for the given class order.

    Draws exactly ``tap_samples`` rows per class from N(mu_hat, diag var_hat),
    labeled by position in ``classes``.
    """
    s = state.settings
    xs, ys = [], []
    for idx, c in enumerate(classes):
        st = state.class_stats[int(c)]
        xs.append(
            gaussian_sample(state.rng.spawn(S_TAP_SAMPLE, int(c)), st.mu_hat, st.var_hat, s.tap_samples)
        )
        ys.append(np.full(s.tap_samples, idx, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def adjust_classifier(state: RunState) -> None:
    """Rebalance all heads jointly on class-balanced Gaussian pseudo features.

    Draws the same number of pseudo features per class from its own-task
    feature distribution and fits the concatenated heads with Adam; nothing
    outside the head bank changes.
    """
    if not state.completed:
        raise UsageError("no completed task to adjust for")
    s = state.settings
    w, b, classes = state.heads.joint()
    x, y = pseudo_features(state, classes)

    opt = AdamState(lr=s.lr)
    params = {"head.w": w, "head.b": b}
    for name, p in params.items():
        opt.register(name, p)
    n = x.shape[0]
    for epoch in range(s.tap_epochs):
        order = state.rng.spawn(S_TAP_BATCH, epoch).permutation(n)
        for start in range(0, n, s.batch_size):
            sel = order[start : start + s.batch_size]
            res = ce_forward_backward([], w, b, x[sel], y[sel])
            adam_step(opt, params, {"head.w": res.d_head_w, "head.b": res.d_head_b})
    state.heads.set_joint(w, b)
    state.adjusted = True


def _class_shrinkage(state: RunState, sigma: np.ndarray) -> float:
    s = state.settings
    if s.shrinkage_mode == "absolute":
        return s.shrinkage
    return s.shrinkage * float(np.trace(sigma)) / sigma.shape[0]


def infer_task_id(state: RunState, x):
    """Task id(s) by Mahalanobis nearest class mean under extractor 1.

    Returns a per-sample array in ``per_sample`` mode; in ``batch`` mode the
    whole batch gets the majority-vote task id (ties to the smaller id).
    """
    if not state.class_stats:
        raise UsageError("no class statistics fitted yet")
    feats, _ = forward(snapshot_layers(state, 1), x)
    class_ids = sorted(state.class_stats)
    dists = np.empty((len(class_ids), feats.shape[0]))
    owners = np.empty(len(class_ids), dtype=np.int64)
    for row, c in enumerate(class_ids):
        st = state.class_stats[c]
        dists[row] = mahalanobis_sq_many(feats, st.mu, st.sigma, _class_shrinkage(state, st.sigma))
        owners[row] = st.task_id
    per_sample = owners[np.argmin(dists, axis=0)]
    if state.settings.tii_mode == "batch":
        return int(np.bincount(per_sample).argmax())
    return per_sample


def _classify(state: RunState, x, force_task: int | None = None) -> np.ndarray:
    """Global class prediction under the active inference mode.

    ``force_task`` routes every sample through one snapshot extractor (a
    diagnostic for measuring the value of task-ID inference).
    """
    x = np.asarray(x, dtype=np.float64)
    w, b, classes = state.heads.joint()
    if force_task is not None:
        task_per_sample = np.full(x.shape[0], force_task, dtype=np.int64)
    elif state.settings.tii:
        t = infer_task_id(state, x)
        task_per_sample = np.full(x.shape[0], t, dtype=np.int64) if np.isscalar(t) or np.ndim(t) == 0 else t
    else:
        feats, _ = forward(current_layers(state), x)
        return classes[np.argmax(feats @ w + b, axis=1)]

    preds = np.empty(x.shape[0], dtype=np.int64)
    for t in np.unique(task_per_sample):
        sel = task_per_sample == t
        feats, _ = forward(snapshot_layers(state, int(t)), x[sel])
        preds[sel] = classes[np.argmax(feats @ w + b, axis=1)]
    return preds


def predict(state: RunState, x) -> np.ndarray:
    """Final two-stage inference; requires the adjusted classifier."""
    if not state.adjusted:
        raise UsageError("run adjust_classifier before predict")
    return _classify(state, x)


def evaluate_split(state: RunState, split: TaskSplit, force_task: int | None = None) -> float:
    preds = _classify(state, split.test_x, force_task=force_task)
    return float(np.mean(preds == split.test_y))


def evaluate_matrix(state: RunState, dataset: Dataset, matrix: AccuracyMatrix | None = None) -> AccuracyMatrix:
    """Append the accuracy row for the most recently completed task."""
    if matrix is None:
        matrix = AccuracyMatrix(n_tasks=len(dataset.tasks))
    i = len(state.completed)
    if i == 0:
        raise ProtocolError("no completed task to evaluate")
    row = [evaluate_split(state, dataset.tasks[tau]) for tau in range(i)]
    matrix.add_row(row)
    return matrix
