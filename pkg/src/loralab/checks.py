"""Built-in verification suites behind the gradcheck and selftest commands.

Each suite returns a list of :class:`CheckResult` so callers can print one
line per check and aggregate an exit code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import lorac, protocol, runner
from .data import gen_synthetic_tasks, make_batches
from .ipc import ImportanceTracker, IpcConfig, accumulate_step
from .linalg import mahalanobis_sq, qr_backward, qr_thin
from .metrics import AccuracyMatrix, compute_metrics
from .netcore import finite_diff_check
from .rng import RngStream

__all__ = ["CheckResult", "qr_factor_checks", "qr_gradient_checks",
           "ortho_gradient_checks", "full_loss_gradient_checks",
           "closed_form_checks", "run_all"]

QR_SHAPES = [(5, 2), (8, 3), (16, 4), (64, 8)]
GRAD_SHAPES = [(5, 2), (8, 3), (16, 4)]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'ok  ' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def qr_factor_checks(per_shape: int = 15, shapes=None) -> list[CheckResult]:
    """Orthogonality, reconstruction and sign convention on seeded inputs."""
    shapes = shapes or QR_SHAPES
    results = []
    for shape in shapes:
        worst_ortho = 0.0
        worst_recon = 0.0
        diag_ok = True
        for seed in range(per_shape):
            a = RngStream(1000 + seed).spawn(*shape).normal(shape)
            pair = qr_thin(a)
            n = shape[1]
            worst_ortho = max(worst_ortho, float(np.abs(pair.q.T @ pair.q - np.eye(n)).max()))
            worst_recon = max(
                worst_recon,
                float(np.linalg.norm(pair.q @ pair.r - a) / np.linalg.norm(a)),
            )
            diag_ok = diag_ok and bool((np.diag(pair.r) > 0).all())
        passed = worst_ortho <= 1e-10 and worst_recon <= 1e-10 and diag_ok
        results.append(
            CheckResult(
                name=f"qr_factor[{shape[0]}x{shape[1]}]",
                passed=passed,
                detail=f"ortho={worst_ortho:.2e} recon={worst_recon:.2e} positive_diag={diag_ok}",
            )
        )
    return results


def qr_gradient_checks(n_instances: int = 21, step: float = 1e-5, tol: float = 1e-5) -> list[CheckResult]:
    """qr_backward vs central differences on random cotangents."""
    results = []
    for k in range(n_instances):
        shape = GRAD_SHAPES[k % len(GRAD_SHAPES)]
        stream = RngStream(2000 + k)
        a = stream.normal(shape)
        cot = stream.spawn(1).normal(shape)

        def closure():
            pair = qr_thin(a)
            return float(np.sum(pair.q * cot)), {"a": qr_backward(pair, cot)}

        report = finite_diff_check(closure, {"a": a}, step=step, tol=tol)
        results.append(
            CheckResult(
                name=f"qr_backward[{shape[0]}x{shape[1]} seed={k}]",
                passed=report.passed,
                detail=f"rel_err={report.max_rel_error:.2e}",
            )
        )
    return results


def _random_basis(stream: RngStream, k: int, width: int) -> lorac.OrthoBasis:
    return lorac.OrthoBasis(matrix=qr_thin(stream.normal((k, width))).q)


def ortho_gradient_checks(n_instances: int = 21, step: float = 1e-5, tol: float = 1e-5) -> list[CheckResult]:
    """Orthonormality-penalty gradient vs central differences."""
    results = []
    for k in range(n_instances):
        stream = RngStream(3000 + k)
        kdim, rank, width = 8, 2, 2
        stack = lorac.LoraStack(location="block0.w", block_index=0, base=np.zeros((kdim, kdim)))
        stack.adapters.append(
            lorac.LoraAdapter(task_id=1, a=stream.normal((kdim, rank)), b=np.zeros((rank, kdim)))
        )
        stack.omega = np.array([1.0])
        basis = _random_basis(stream.spawn(1), kdim, width)

        def closure():
            loss, grad = lorac.ortho_loss_and_grad(stack, basis)
            return loss, {"a": grad}

        report = finite_diff_check(closure, {"a": stack.adapters[0].a}, step=step, tol=tol)
        results.append(
            CheckResult(
                name=f"ortho_grad[seed={k}]",
                passed=report.passed,
                detail=f"rel_err={report.max_rel_error:.2e}",
            )
        )
    return results


def _tiny_state(seed: int):
    """A mid-task-2 state on a tiny stream, for full-objective checks.

    Alternates the importance-freezing flag so the suite covers both the
    all-locations-trainable path and the frozen-location path.
    """
    cfg = {
        "seed": seed,
        "dataset": {
            "kind": "synthetic",
            "tasks": 2,
            "classes_per_task": 2,
            "n_train": 8,
            "n_test": 2,
            "input_dim": 6,
            "class_sep": 3.0,
        },
        "model": {"blocks": 2, "pretrain": None},
        "train": {"lr": 0.05, "epochs": 1, "batch_size": 8, "rank": 2, "ortho_weight": 0.5},
        "variant": {"ipc": seed % 2 == 0},
    }
    state, dataset = runner.build_state(cfg)
    protocol.train_task(state, dataset.tasks[0])
    head, _, _ = protocol.begin_task(state, dataset.tasks[1])
    batch_x, batch_y = make_batches(dataset.tasks[1], 4, state.rng.spawn(99))[0]
    return state, head, batch_x, protocol._local_labels(head, batch_y)


def full_loss_gradient_checks(n_instances: int = 20, step: float = 1e-5, tol: float = 1e-5) -> list[CheckResult]:
    """Gradients of the full fine-tuning objective (cross entropy plus
    weighted orthogonality penalty) vs central differences, for every
    trainable parameter of a task-2 step."""
    results = []
    for k in range(n_instances):
        state, head, bx, by = _tiny_state(4000 + k)

        def closure():
            res = protocol.total_loss_and_grads(state, head, bx, by)
            return res.loss, res.grads

        params = protocol.trainable_params(state, head)
        report = finite_diff_check(closure, params, step=step, tol=tol)
        results.append(
            CheckResult(
                name=f"full_loss_grad[seed={k}]",
                passed=report.passed,
                detail=f"rel_err={report.max_rel_error:.2e} over {len(params)} tensors",
            )
        )
    return results


def closed_form_checks(tol: float = 1e-12) -> list[CheckResult]:
    """Hand-computable cases that must hold to 1e-12."""
    results = []

    stack = lorac.LoraStack(location="block0.w", block_index=0, base=np.zeros((2, 2)))
    stack.adapters.append(lorac.LoraAdapter(task_id=1, a=np.array([[5.0], [0.0]]), b=np.zeros((1, 2))))
    stack.omega = np.array([1.0])
    basis = lorac.OrthoBasis(matrix=np.array([[1.0], [0.0]]))
    loss, _ = lorac.ortho_loss_and_grad(stack, basis)
    err = abs(loss - math.sqrt(2.0))
    results.append(CheckResult("ortho_duplicated_column", err <= tol, f"|loss-sqrt2|={err:.2e}"))

    d = mahalanobis_sq(
        np.array([[2.0, 0.0]]),
        np.array([[0.0, 0.0]]),
        np.array([[4.0, 0.0], [0.0, 1.0]]),
        0.0,
    )
    err = abs(d - 1.0)
    results.append(CheckResult("mahalanobis_diagonal", err <= tol, f"|d-1|={err:.2e}"))

    m = AccuracyMatrix(n_tasks=2)
    m.add_row([0.9])
    m.add_row([0.7, 0.8])
    avg, forget = compute_metrics(m)
    err = max(abs(avg - 0.75), abs(forget - 0.2))
    results.append(CheckResult("metrics_two_task", err <= tol, f"max_err={err:.2e}"))

    tracker = ImportanceTracker(task_id=1)
    cfg = IpcConfig(beta1=0.85, beta2=0.85)
    accumulate_step(tracker, {"block0.w": np.array([[2.0]])}, {"block0.w": np.array([[-3.0]])}, cfg)
    err = max(
        abs(float(tracker.ibar["block0.w"][0, 0]) - 0.9),
        abs(float(tracker.ubar["block0.w"][0, 0]) - 0.9),
    )
    results.append(CheckResult("importance_one_step", err <= tol, f"max_err={err:.2e}"))
    return results


def _determinism_check() -> CheckResult:
    cfg = {
        "seed": 7,
        "dataset": {"kind": "synthetic", "tasks": 2, "classes_per_task": 2, "n_train": 20,
                    "n_test": 5, "input_dim": 8, "class_sep": 5.0},
        "model": {"blocks": 2, "pretrain": None},
        "train": {"epochs": 2, "batch_size": 16, "rank": 2},
        "tap": {"samples_per_class": 16, "epochs": 2},
    }
    import json

    doc1 = json.dumps(runner.run_experiment(cfg).results, sort_keys=True)
    doc2 = json.dumps(runner.run_experiment(cfg).results, sort_keys=True)
    return CheckResult("determinism_small_run", doc1 == doc2, "byte-identical results")


def _gaussian_stats_check() -> CheckResult:
    from .linalg import gaussian_sample

    x = gaussian_sample(RngStream(5), np.zeros((1, 4)), np.ones((1, 4)), 10000)
    mean_err = float(np.abs(x.mean(axis=0)).max())
    var_err = float(np.abs(x.var(axis=0, ddof=1) - 1.0).max())
    return CheckResult(
        "gaussian_sampler_stats",
        mean_err <= 0.05 and var_err <= 0.05,
        f"mean_err={mean_err:.3f} var_err={var_err:.3f}",
    )


def run_all(fast: bool = False) -> list[CheckResult]:
    """Everything: factor suite, gradient suites, closed forms, determinism."""
    results = []
    results += qr_factor_checks()
    results += qr_gradient_checks(6 if fast else 21)
    results += ortho_gradient_checks(6 if fast else 21)
    results += full_loss_gradient_checks(3 if fast else 20)
    results += closed_form_checks()
    results.append(_gaussian_stats_check())
    results.append(_determinism_check())
    return results
