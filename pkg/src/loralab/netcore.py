"""Minimal hand-derived gradient engine for small dense backbones.

A backbone is a stack of linear blocks with an elementwise activation; the
classifier is one linear head per task. Gradients are derived by hand and
verified against central finite differences (see :func:`finite_diff_check`).
Only activations that are differentiable everywhere are offered, so the
finite-difference oracle is valid at every point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError, UsageError
from .linalg import as_matrix
from .rng import RngStream

__all__ = [
    "ACTIVATIONS",
    "Block",
    "Backbone",
    "make_backbone",
    "forward",
    "ce_forward_backward",
    "CeResult",
    "Head",
    "HeadBank",
    "AdamState",
    "adam_step",
    "finite_diff_check",
    "FdReport",
    "pretrain_backbone",
]


def _identity(z):
    return z


def _one(out):
    return np.ones_like(out)


def _dtanh(out):
    return 1.0 - out * out

# name -> (activation, derivative expressed in terms of the activation output)
ACTIVATIONS = {
    "tanh": (np.tanh, _dtanh),
    "identity": (_identity, _one),
}


@dataclass
class Block:
    weight: np.ndarray  # (k, d), the frozen base matrix once training starts
    bias: np.ndarray  # (1, d)
    activation: str


@dataclass
class Backbone:
    blocks: list[Block]

    @property
    def input_dim(self) -> int:
        return self.blocks[0].weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1].weight.shape[1]

    def layer_params(self) -> list[tuple[np.ndarray, np.ndarray, str]]:
        """Base (weight, bias, activation) triples, with no adapters applied."""
        return [(b.weight, b.bias, b.activation) for b in self.blocks]


def make_backbone(input_dim: int, n_blocks: int, activation: str, rng: RngStream) -> Backbone:
    """Square blocks with seeded random orthogonal weights and zero biases."""
    if activation not in ACTIVATIONS:
        raise UsageError(f"unknown activation {activation!r}; have {sorted(ACTIVATIONS)}")
    if n_blocks < 1 or input_dim < 1:
        raise UsageError("need at least one block and a positive input dim")
    from .linalg import qr_thin  # local import to avoid a cycle at module load

    blocks = []
    for _ in range(n_blocks):
        g = rng.normal((input_dim, input_dim))
        blocks.append(
            Block(
                weight=qr_thin(g).q.copy(),
                bias=np.zeros((1, input_dim)),
                activation=activation,
            )
        )
    return Backbone(blocks=blocks)


def forward(layers, x):
    """Run the block stack; returns (features, per-layer (input, output) cache)."""
    h = as_matrix(x, "inputs")
    cache = []
    for w, b, act in layers:
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"block expects {w.shape[0]} inputs, got {h.shape[1]}")
        out = ACTIVATIONS[act][0](h @ w + b)
        cache.append((h, out))
        h = out
    return h, cache


@dataclass
class CeResult:
    """Mean softmax cross-entropy and its gradients for one batch."""

    loss: float
    features: np.ndarray
    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_head_w: np.ndarray
    d_head_b: np.ndarray


def ce_forward_backward(layers, head_w, head_b, x, y) -> CeResult:
    """Forward and backward pass of the cross-entropy loss.

    ``y`` holds local class indices into the head's columns. Gradients are
    returned for every block weight/bias and the head; the block-weight
    gradients are with respect to the *effective* weights passed in.
    """
    y = np.asarray(y)
    if y.ndim != 1 or y.size == 0:
        raise DataError("labels must be a nonempty 1-D array")
    m = head_w.shape[1]
    if ((y < 0) | (y >= m)).any():
        raise DataError(f"label outside the active head (0..{m - 1})")

    features, cache = forward(layers, x)
    n = features.shape[0]
    if y.size != n:
        raise ShapeError(f"{n} samples but {y.size} labels")

    logits = features @ head_w + head_b
    zmax = logits.max(axis=1, keepdims=True)
    ez = np.exp(logits - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    # loss_i = logsumexp(z_i) - z_{i,y_i}
    losses = (np.log(denom) + zmax)[:, 0] - logits[np.arange(n), y]
    loss = float(losses.mean())

    p = ez / denom
    d_logits = p
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n

    d_head_w = features.T @ d_logits
    d_head_b = d_logits.sum(axis=0, keepdims=True)

    d_h = d_logits @ head_w.T
    d_weights: list[np.ndarray] = [None] * len(layers)
    d_biases: list[np.ndarray] = [None] * len(layers)
    for idx in range(len(layers) - 1, -1, -1):
        w, _, act = layers[idx]
        inp, out = cache[idx]
        dz = d_h * ACTIVATIONS[act][1](out)
        d_weights[idx] = inp.T @ dz
        d_biases[idx] = dz.sum(axis=0, keepdims=True)
        d_h = dz @ w.T

    return CeResult(
        loss=loss,
        features=features,
        d_weights=d_weights,
        d_biases=d_biases,
        d_head_w=d_head_w,
        d_head_b=d_head_b,
    )


@dataclass
class Head:
    task_id: int
    classes: np.ndarray  # global class ids, in column order
    w: np.ndarray  # (feature_dim, m)
    b: np.ndarray  # (1, m)


class HeadBank:
    """One zero-initialized linear head per learned task."""

    def __init__(self):
        self.heads: dict[int, Head] = {}
        self.order: list[int] = []

    def add_head(self, task_id: int, classes, feature_dim: int) -> Head:
        if task_id in self.heads:
            raise UsageError(f"head for task {task_id} already exists")
        classes = np.asarray(classes, dtype=np.int64)
        head = Head(
            task_id=task_id,
            classes=classes,
            w=np.zeros((feature_dim, classes.size)),
            b=np.zeros((1, classes.size)),
        )
        self.heads[task_id] = head
        self.order.append(task_id)
        return head

    def head(self, task_id: int) -> Head:
        if task_id not in self.heads:
            raise UsageError(f"no head for task {task_id}")
        return self.heads[task_id]

    def joint(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concatenate all heads (task order): (W, b, global class ids)."""
        heads = [self.heads[t] for t in self.order]
        w = np.concatenate([h.w for h in heads], axis=1)
        b = np.concatenate([h.b for h in heads], axis=1)
        classes = np.concatenate([h.classes for h in heads])
        return w, b, classes

    def set_joint(self, w: np.ndarray, b: np.ndarray) -> None:
        """Write concatenated head parameters back into the per-task heads."""
        col = 0
        for t in self.order:
            h = self.heads[t]
            m = h.classes.size
            h.w = w[:, col : col + m].copy()
            h.b = b[:, col : col + m].copy()
            col += m


class AdamState:
    """Adam moments for a named set of parameters.

    Each parameter carries its own learning rate (scalar or an array
    broadcastable to the parameter, which is how composition weights mix a
    current-task rate with a lower historical rate).
    """

    def __init__(self, lr: float, beta_m: float = 0.9, beta_v: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta_m = beta_m
        self.beta_v = beta_v
        self.eps = eps
        self.slots: dict[str, dict] = {}

    def register(self, name: str, param: np.ndarray, lr=None) -> None:
        if name in self.slots:
            raise UsageError(f"parameter {name!r} already registered")
        self.slots[name] = {
            "m": np.zeros_like(param),
            "v": np.zeros_like(param),
            "t": 0,
            "lr": self.lr if lr is None else lr,
        }


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Standard bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if name not in state.slots:
            raise UsageError(f"gradient for unregistered parameter {name!r}")
        p = params[name]
        if p.shape != g.shape:
            raise ShapeError(f"{name}: param shape {p.shape} != grad shape {g.shape}")
        slot = state.slots[name]
        slot["t"] += 1
        t = slot["t"]
        slot["m"] = state.beta_m * slot["m"] + (1.0 - state.beta_m) * g
        slot["v"] = state.beta_v * slot["v"] + (1.0 - state.beta_v) * (g * g)
        m_hat = slot["m"] / (1.0 - state.beta_m**t)
        v_hat = slot["v"] / (1.0 - state.beta_v**t)
        p -= slot["lr"] * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass
class FdReport:
    """Per-parameter comparison of analytic vs central-difference gradients."""

    rel_errors: dict[str, float]
    tol: float
    entries_checked: int

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values()) if self.rel_errors else 0.0

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.rel_errors.values())

    def failures(self) -> list[str]:
        return [n for n, e in self.rel_errors.items() if e > self.tol]


def finite_diff_check(closure, params: dict, step: float, tol: float) -> FdReport:
    """Compare a closure's analytic gradients against central differences.

    ``closure()`` evaluates the model from live state and returns
    ``(loss, grads)`` with grads keyed like ``params``. Entries of each
    parameter are perturbed in place (and restored), so ``params`` must be
    the arrays the closure actually reads.
    """
    if step <= 0:
        raise UsageError(f"step must be positive, got {step}")
    _, analytic = closure()
    rel_errors: dict[str, float] = {}
    checked = 0
    for name, p in params.items():
        g_an = np.asarray(analytic[name], dtype=np.float64)
        g_fd = np.zeros_like(g_an)
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp = closure()[0]
            flat[idx] = orig - step
            lm = closure()[0]
            flat[idx] = orig
            g_fd.reshape(-1)[idx] = (lp - lm) / (2.0 * step)
            checked += 1
        diff = float(np.linalg.norm(g_an - g_fd))
        denom = max(float(np.linalg.norm(g_an)), float(np.linalg.norm(g_fd)))
        rel_errors[name] = diff / denom if denom > 1e-10 else diff
    return FdReport(rel_errors=rel_errors, tol=tol, entries_checked=checked)


def pretrain_backbone(backbone: Backbone, x, y, n_classes: int, epochs: int,
                      batch_size: int, lr: float, rng: RngStream) -> float:
    """Pretext phase: fit the plain block weights on a disposable task.

    Trains all block weights, biases and a temporary head with Adam, then
    discards the head. Gives the frozen base a feature space shaped by data
    rather than random projections. Returns the final epoch's mean loss.
    """
    x = as_matrix(x, "pretext inputs")
    y = np.asarray(y)
    head_w = np.zeros((backbone.feature_dim, n_classes))
    head_b = np.zeros((1, n_classes))

    params: dict[str, np.ndarray] = {"head.w": head_w, "head.b": head_b}
    for i, blk in enumerate(backbone.blocks):
        params[f"block{i}.w"] = blk.weight
        params[f"block{i}.b"] = blk.bias
    state = AdamState(lr=lr)
    for name, p in params.items():
        state.register(name, p)

    n = x.shape[0]
    last = math.nan
    for epoch in range(epochs):
        order = rng.spawn(epoch).permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            layers = backbone.layer_params()
            res = ce_forward_backward(layers, head_w, head_b, x[sel], y[sel])
            grads = {"head.w": res.d_head_w, "head.b": res.d_head_b}
            for i in range(len(backbone.blocks)):
                grads[f"block{i}.w"] = res.d_weights[i]
                grads[f"block{i}.b"] = res.d_biases[i]
            adam_step(state, params, grads)
            losses.append(res.loss)
        last = float(np.mean(losses))
    return last
