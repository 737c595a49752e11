"""Finite-difference validation of every analytic gradient.

Central differences with h = 1e-5 in 64-bit arithmetic, compared by
relative vector error |g_fd - g_an| / max(|g_fd|, |g_an|, floor). The
large end-to-end case samples a random subset of coordinates per instance
to keep the whole battery under the runtime budget; the small kernels are
checked on every coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng, toy
from .errors import NumericalError
from .heads import DETECTOR_CHANNELS
from .losses import LossWeights, kl_loss_grad, lp_loss, pkt_loss_grad
from .matching import CorrespondenceSet, Match, MatchMargins, ld_loss_relaxed

FD_STEP = 1e-5


def finite_difference(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = FD_STEP,
    indices: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central-difference gradient of f at x over flat `indices` (default all)."""
    flat = np.asarray(x, dtype=np.float64).ravel().copy()
    if indices is None:
        indices = np.arange(flat.size)
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(flat.reshape(x.shape))
        flat[i] = orig - h
        fm = f(flat.reshape(x.shape))
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _random_logits(stream: rng.Stream, hc: int, wc: int) -> np.ndarray:
    return stream.normal((hc, wc, DETECTOR_CHANNELS))


def check_kl(instances: int = 20, seed: int = 1, tol: float = 1e-6) -> CheckResult:
    worst = 0.0
    for k in range(instances):
        stream = rng.Stream(rng.derive_seed(seed, k))
        teacher = _random_logits(stream, 2, 2)
        student = _random_logits(stream, 2, 2)
        analytic = kl_loss_grad(teacher, student).grad
        fd = finite_difference(lambda s: kl_loss_grad(teacher, s).value, student)
        worst = max(worst, rel_error(fd, analytic.ravel()))
    return CheckResult("kl", instances, worst, tol)


def check_pkt(instances: int = 20, seed: int = 2, tol: float = 1e-6) -> CheckResult:
    worst = 0.0
    for k in range(instances):
        stream = rng.Stream(rng.derive_seed(seed, k))
        teacher = _random_logits(stream, 2, 2)
        student = _random_logits(stream, 2, 2)
        analytic = pkt_loss_grad(teacher, student).grad
        fd = finite_difference(lambda s: pkt_loss_grad(teacher, s).value, student)
        worst = max(worst, rel_error(fd, analytic.ravel()))
    return CheckResult("pkt", instances, worst, tol)


def check_lp(instances: int = 20, seed: int = 3, tol: float = 1e-6) -> CheckResult:
    weights = LossWeights(alpha=1.0, pkt_weight=0.7)
    worst = 0.0
    for k in range(instances):
        stream = rng.Stream(rng.derive_seed(seed, k))
        teacher = _random_logits(stream, 2, 2)
        student = _random_logits(stream, 2, 2)
        analytic = lp_loss(teacher, student, weights).grad
        fd = finite_difference(lambda s: lp_loss(teacher, s, weights).value, student)
        worst = max(worst, rel_error(fd, analytic.ravel()))
    return CheckResult("lp", instances, worst, tol)


def _synthetic_correspondences(n_matches: int, spacing: float = 40.0) -> CorrespondenceSet:
    """Matches on a wide grid so every other match is a non-match candidate."""
    matches = []
    others = tuple(range(n_matches))
    for i in range(n_matches):
        x = (i * spacing, 0.0)
        matches.append(
            Match(
                index_a=i,
                index_b=i,
                x=x,
                x_proj=x,
                x_b=x,
                nonmatch=tuple(j for j in others if j != i),
            )
        )
    return CorrespondenceSet(matches=tuple(matches), threshold=8.0)


def check_ld_relaxed(instances: int = 20, seed: int = 4, tol: float = 1e-6) -> CheckResult:
    """Relaxed matching loss on 8 descriptors of dimension 16, margins P=2, Q=10."""
    margins = MatchMargins(p=2.0, q=10.0)
    corr = _synthetic_correspondences(4)
    worst = 0.0
    for k in range(instances):
        stream = rng.Stream(rng.derive_seed(seed, k))
        desc_a = 0.5 * stream.normal((4, 16))
        desc_b = 0.5 * stream.normal((4, 16))
        res = ld_loss_relaxed(corr, margins, desc_a, desc_b)
        fd_a = finite_difference(
            lambda v: ld_loss_relaxed(corr, margins, v, desc_b).value, desc_a
        )
        fd_b = finite_difference(
            lambda v: ld_loss_relaxed(corr, margins, desc_a, v).value, desc_b
        )
        fd = np.concatenate([fd_a, fd_b])
        analytic = np.concatenate([res.grad_a.ravel(), res.grad_b.ravel()])
        worst = max(worst, rel_error(fd, analytic))
    return CheckResult("ld_relaxed", instances, worst, tol)


_TOY_PARAMS = ("w_det", "b_det", "w_desc", "b_desc")


def _toy_instance(seed: int) -> tuple[toy.ToyStudent, toy.StepData, toy.TrainConfig]:
    config = toy.TrainConfig(
        steps=1,
        seed=seed,
        image_size=32,
        descriptor_dim=16,
        n_images=1,
        weights=LossWeights(alpha=1.0, pkt_weight=1.0),
    )
    dataset = toy.make_dataset(config)
    model = toy.ToyStudent.random(rng.derive_seed(seed, 1), 16, 0.1)
    data = toy.prepare_step(model, dataset[0], config, rng.derive_seed(seed, 10_000))
    return model, data, config


def _toy_total(model: toy.ToyStudent, data: toy.StepData, config: toy.TrainConfig) -> float:
    breakdown, _ = toy.step_loss_and_grads(data, model, config, relaxed=True)
    return breakdown.total


def check_toy(
    instances: int = 20,
    seed: int = 5,
    tol: float = 1e-5,
    coords_per_tensor: Optional[int] = 10,
) -> CheckResult:
    """End-to-end objective on a 32x32 instance with 16-d descriptors.

    With coords_per_tensor=None every parameter coordinate is checked
    (slow); otherwise a seeded subset per tensor keeps the battery fast.
    """
    worst = 0.0
    for k in range(instances):
        model, data, config = _toy_instance(rng.derive_seed(seed, 100 + k))
        _, grads = toy.step_loss_and_grads(data, model, config, relaxed=True)
        fd_parts = []
        an_parts = []
        pick = rng.Stream(rng.derive_seed(seed, 200 + k))
        for name in _TOY_PARAMS:
            value = getattr(model, name)
            n = value.size
            if coords_per_tensor is None or coords_per_tensor >= n:
                indices = np.arange(n)
            else:
                indices = pick.sample_indices(n, coords_per_tensor)

            def f(v, _name=name):
                trial = model.copy()
                setattr(trial, _name, v)
                return _toy_total(trial, data, config)

            fd_parts.append(finite_difference(f, value, indices=indices))
            an_parts.append(grads[name].ravel()[indices])
        worst = max(worst, rel_error(np.concatenate(fd_parts), np.concatenate(an_parts)))
    return CheckResult("toy_total", instances, worst, tol)


def run_all(
    instances: int = 20, seed: int = 0, corrupt: bool = False
) -> list[CheckResult]:
    """Every suite with per-suite derived seeds; `corrupt` is a test hook
    that injects a deliberate error into the KL comparison so failure
    handling can be exercised."""
    results = [
        check_kl(instances, rng.derive_seed(seed, 11)),
        check_pkt(instances, rng.derive_seed(seed, 12)),
        check_lp(instances, rng.derive_seed(seed, 13)),
        check_ld_relaxed(instances, rng.derive_seed(seed, 14)),
        check_toy(instances, rng.derive_seed(seed, 15)),
    ]
    if corrupt:
        results[0] = CheckResult(
            name="kl(corrupted)",
            instances=results[0].instances,
            max_rel_error=results[0].max_rel_error + 1.0,
            tolerance=results[0].tolerance,
        )
    return results


def require_all_pass(results: Sequence[CheckResult]) -> None:
    failed = [r for r in results if not r.passed]
    if failed:
        names = ", ".join(r.name for r in failed)
        raise NumericalError(f"gradient check failed: {names}")
