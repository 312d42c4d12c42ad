"""Weighted composition of per-task low-rank adapters.

Each adapted location (one block weight) carries a stack: the frozen base
matrix, one rank-R adapter per learned task, and a weight vector omega over
the adapters. The effective weight is

    W = W_base + sum_t omega_t * (A_t @ B_t)

with only the newest adapter and omega trainable. At a task boundary the
adapter is sealed: its A factor is QR-factored and the Q columns join the
location's orthogonality basis, against which later tasks are regularized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FreezeViolationError, ShapeError, UsageError
from .linalg import QrPair, gaussian_sample, qr_backward, qr_thin
from .rng import RngStream

ORTHO_ZERO_TOL = 1e-10

__all__ = [
    "ORTHO_ZERO_TOL",
    "LoraAdapter",
    "LoraStack",
    "OrthoBasis",
    "compose_effective",
    "add_task_adapter",
    "ortho_loss_and_grad",
    "seal_task",
    "apply_freeze",
    "factor_grads",
]


@dataclass
class LoraAdapter:
    """One task's low-rank delta, ``A @ B`` with A (K x R) and B (R x D)."""

    task_id: int
    a: np.ndarray
    b: np.ndarray
    trainable: bool = True
    _delta_cache: np.ndarray | None = None

    def delta(self) -> np.ndarray:
        if self._delta_cache is not None:
            return self._delta_cache
        return self.a @ self.b


@dataclass
class OrthoBasis:
    """Concatenated Q columns of sealed adapters at one location."""

    matrix: np.ndarray | None = None

    @property
    def width(self) -> int:
        return 0 if self.matrix is None else self.matrix.shape[1]

    def extended(self, q: np.ndarray) -> "OrthoBasis":
        if self.matrix is None:
            return OrthoBasis(matrix=q.copy())
        return OrthoBasis(matrix=np.concatenate([self.matrix, q], axis=1))


@dataclass
class LoraStack:
    """All adapter state for one location (block index + weight name)."""

    location: str
    block_index: int
    base: np.ndarray
    adapters: list[LoraAdapter] = field(default_factory=list)
    omega: np.ndarray = field(default_factory=lambda: np.zeros(0))
    frozen: bool = False

    def current(self) -> LoraAdapter:
        if not self.adapters or not self.adapters[-1].trainable:
            raise UsageError(f"{self.location}: no trainable adapter")
        return self.adapters[-1]


def compose_effective(stack: LoraStack) -> np.ndarray:
    """Effective weight W_base + sum_t omega_t * delta_t.

    The weighted deltas are accumulated first and the base added once, in
    fixed task order, so recomposition from unchanged inputs is
    byte-reproducible and the result is linear in omega.
    """
    if not stack.adapters:
        return stack.base.copy()
    acc = np.zeros_like(stack.base)
    for w, ad in zip(stack.omega, stack.adapters):
        d = ad.delta()
        if d.shape != stack.base.shape:
            raise ShapeError(
                f"{stack.location}: adapter delta {d.shape} != base {stack.base.shape}"
            )
        acc += w * d
    return stack.base + acc


def add_task_adapter(stack: LoraStack, task_id: int, rank: int, rng: RngStream) -> LoraAdapter:
    """Append a fresh adapter: A ~ N(0, 2/K), B = 0, omega entry 1.

    B starting at zero means the effective weight is unchanged by the
    append. Raises on frozen stacks.
    """
    if stack.frozen:
        raise FreezeViolationError(f"{stack.location} is frozen; cannot add an adapter")
    if stack.adapters and stack.adapters[-1].trainable:
        raise UsageError(f"{stack.location}: previous adapter not sealed yet")
    k = stack.base.shape[0]
    if rank < 1 or rank > k:
        raise UsageError(f"rank must be in [1, {k}], got {rank}")
    a = gaussian_sample(rng, np.zeros((1, rank)), np.full((1, rank), 2.0 / k), k)
    adapter = LoraAdapter(task_id=task_id, a=a, b=np.zeros((rank, stack.base.shape[1])))
    stack.adapters.append(adapter)
    stack.omega = np.concatenate([stack.omega, [1.0]])
    return adapter


def ortho_loss_and_grad(stack: LoraStack, basis: OrthoBasis) -> tuple[float, np.ndarray]:
    """Orthonormality penalty on [basis, Q] and its gradient in A.

    Q comes from the thin QR of the current adapter's A; the loss is the
    Frobenius norm of (Qt^T Qt - I) over the concatenated columns. The
    gradient reaches A through the taped QR reverse rule; the frozen basis
    receives none. At an exactly orthonormal point the norm is not smooth
    but the loss is constant zero along Q's manifold, so the gradient
    returned there is zero.
    """
    adapter = stack.current()
    pair = qr_thin(adapter.a)
    loss, q_bar = _gram_penalty(basis.matrix, pair)
    if q_bar is None:
        return loss, np.zeros_like(adapter.a)
    return loss, qr_backward(pair, q_bar)


def _gram_penalty(basis_matrix: np.ndarray | None, pair: QrPair):
    """Shared penalty core: returns (loss, cotangent on the new Q columns)."""
    if basis_matrix is not None:
        qt = np.concatenate([basis_matrix, pair.q], axis=1)
        w = basis_matrix.shape[1]
    else:
        qt = pair.q
        w = 0
    gram = qt.T @ qt
    g = gram - np.eye(gram.shape[0])
    loss = float(np.linalg.norm(g))
    if loss <= ORTHO_ZERO_TOL:
        return loss, None
    q_bar = (2.0 / loss) * (qt @ g)[:, w:]
    return loss, q_bar


def seal_task(stack: LoraStack, basis: OrthoBasis) -> OrthoBasis:
    """Finish the current task at this location.

    Marks the newest adapter immutable, caches its delta, and returns the
    basis extended with the Q columns of its A factor.
    """
    if not stack.adapters:
        raise UsageError(f"{stack.location}: nothing to seal")
    adapter = stack.adapters[-1]
    if not adapter.trainable:
        raise UsageError(f"{stack.location}: adapter for task {adapter.task_id} already sealed")
    adapter.trainable = False
    adapter._delta_cache = adapter.a @ adapter.b
    return basis.extended(qr_thin(adapter.a).q)


def apply_freeze(stacks: dict[str, LoraStack], freeze_locations) -> None:
    """Mark the listed stacks frozen: no new adapters, omega immutable."""
    for loc in freeze_locations:
        if loc not in stacks:
            raise UsageError(f"unknown location {loc!r}")
    for loc in freeze_locations:
        stacks[loc].frozen = True


def factor_grads(stack: LoraStack, d_weff: np.ndarray):
    """Map a gradient on the effective weight onto (A, B, omega).

    Returns ``(d_a, d_b, d_omega)`` for the current adapter and the full
    omega vector; historical adapters are frozen so only their omega entries
    carry gradient.
    """
    adapter = stack.current()
    w_cur = stack.omega[-1]
    d_a = w_cur * (d_weff @ adapter.b.T)
    d_b = w_cur * (adapter.a.T @ d_weff)
    d_omega = np.array([float(np.sum(ad.delta() * d_weff)) for ad in stack.adapters])
    return d_a, d_b, d_omega
