"""Inference-time attacks on a trained global model.

White-box attacks (FGSM, PGD, JSMA, adversarial patch) take a ``Classifier``
and use its input gradients. Black-box attacks (square attack, spatial
transformations) wrap whatever they receive in a ``ForwardModel`` first, so
they can only ask for class probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from ..learner import as_forward_model

ITA_KINDS = ("FGSM", "PGD", "JSMA", "PATCH", "SQUARE", "ST")


@dataclass(frozen=True)
class ItaConfig:
    kind: str = "PGD"
    eps: float = 0.3
    alpha: float | None = None
    steps: int = 10
    random_start: bool = False
    theta: float = 1.0
    gamma: float = 0.1
    p_init: float = 0.3
    iterations: int = 500
    rotations: tuple[float, ...] = (-30.0, -15.0, 0.0, 15.0, 30.0)
    translations: tuple[int, ...] = (-2, 0, 2)
    patch_size: int = 2
    patch_iterations: int = 100
    patch_lr: float = 0.1
    target: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ITA_KINDS:
            raise ValueError(f"unknown inference-time attack {self.kind!r}; choose from {ITA_KINDS}")
        for name in ("eps", "steps", "theta", "gamma", "p_init", "iterations", "patch_iterations", "patch_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def step_size(self) -> float:
        return self.eps / 4 if self.alpha is None else self.alpha


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 3 else (x, False)


def project(x_adv: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    """Clip into the L-inf ball around ``x0`` intersected with [0, 1]."""
    out = np.clip(x_adv, np.maximum(x0 - eps, 0.0), np.minimum(x0 + eps, 1.0))
    # x0 +- eps may round one ulp past the ball
    over = np.abs(out - x0) > eps
    while over.any():
        out[over] = np.nextafter(out[over], x0[over])
        over = np.abs(out - x0) > eps
    return out


def fgsm(model, x, y, eps: float) -> np.ndarray:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    xb, single = _batch(x)
    if eps == 0:
        return xb[0].copy() if single else xb.copy()
    out = project(xb + eps * np.sign(model.input_grad(xb, y)), xb, eps)
    return out[0] if single else out


def pgd(model, x, y, eps: float, alpha: float, steps: int, random_start: bool = False, seed=0) -> np.ndarray:
    if alpha <= 0 or steps < 0 or eps < 0:
        raise ValueError("pgd needs alpha > 0, steps >= 0, eps >= 0")
    xb, single = _batch(x)
    adv = xb.copy()
    if random_start:
        rng = np.random.default_rng(seed)
        adv = project(xb + rng.uniform(-eps, eps, size=xb.shape), xb, eps)
    for _ in range(steps):
        adv = project(adv + alpha * np.sign(model.input_grad(adv, y)), xb, eps)
    return adv[0] if single else adv


def jsma(model, x, y_target, theta: float = 1.0, gamma: float = 0.1) -> np.ndarray:
    """Greedy single-pixel saliency attack that only increases pixels.

    Each iteration raises, by ``theta``, the unmodified pixel whose increase
    most helps the target class while hurting the others. Stops once the
    target is predicted, no pixel has positive saliency, or
    ``floor(gamma * pixels)`` pixels have been changed.
    """
    if theta <= 0 or not 0 < gamma <= 1:
        raise ValueError("jsma needs theta > 0 and 0 < gamma <= 1")
    xb, single = _batch(x)
    n = len(xb)
    K = model.num_classes
    targets = np.broadcast_to(np.asarray(y_target, dtype=np.int64), (n,)).copy()
    if targets.min() < 0 or targets.max() >= K:
        raise ValueError(f"target classes must lie in [0, {K})")
    n_feat = int(np.prod(xb.shape[1:]))
    budget = math.floor(gamma * n_feat + 1e-9)
    adv = xb.reshape(n, n_feat).copy()
    touched = np.zeros((n, n_feat), dtype=bool)
    active = model.predict(xb) != targets
    for _ in range(budget):
        if not active.any():
            break
        rows = np.flatnonzero(active)
        jac = model.prob_jacobian(adv[rows].reshape((-1,) + xb.shape[1:])).reshape(len(rows), K, n_feat)
        d_target = jac[np.arange(len(rows)), targets[rows]]
        d_other = jac.sum(axis=1) - d_target
        usable = ~touched[rows] & (adv[rows] < 1.0) & (d_target > 0) & (d_other < 0)
        saliency = np.where(usable, d_target * np.abs(d_other), 0.0)
        best = saliency.argmax(axis=1)
        ok = saliency[np.arange(len(rows)), best] > 0
        for r, b, good in zip(rows, best, ok):
            if good:
                adv[r, b] = min(1.0, adv[r, b] + theta)
                touched[r, b] = True
            else:
                active[r] = False
        still = rows[ok]
        if still.size:
            pred = model.predict(adv[still].reshape((-1,) + xb.shape[1:]))
            active[still] = pred != targets[still]
    out = adv.reshape(xb.shape)
    return out[0] if single else out


class AdversarialPatch(NamedTuple):
    patch: np.ndarray
    apply: Callable[..., np.ndarray]


def _stamp_at(x: np.ndarray, patch: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    out = x.copy()
    s = patch.shape[0]
    for i, (r, c) in enumerate(zip(rows, cols)):
        out[i, r : r + s, c : c + s, :] = patch
    return out


def _positions(rng, n, shape, s):
    h, w = shape[0], shape[1]
    return rng.integers(0, h - s + 1, size=n), rng.integers(0, w - s + 1, size=n)


def adversarial_patch(
    model,
    x_train,
    size: int,
    iterations: int,
    target: int = 0,
    lr: float = 0.1,
    batch_size: int = 32,
    seed=0,
) -> AdversarialPatch:
    """Universal targeted patch trained at random placements.

    Returns the patch and ``apply(x, seed)`` which stamps it at seeded
    random positions.
    """
    xs, _ = _batch(x_train)
    h, w, c = xs.shape[1:]
    if not 1 <= size <= min(h, w):
        raise ValueError(f"patch size {size} does not fit {h}x{w} images")
    rng = np.random.default_rng(seed)
    patch = rng.uniform(0.0, 1.0, size=(size, size, c))
    for _ in range(iterations):
        idx = rng.choice(len(xs), size=min(batch_size, len(xs)), replace=False)
        rows, cols = _positions(rng, len(idx), (h, w), size)
        stamped = _stamp_at(xs[idx], patch, rows, cols)
        g = model.input_grad(stamped, np.full(len(idx), target))
        gp = np.zeros_like(patch)
        for i, (r, cc) in enumerate(zip(rows, cols)):
            gp += g[i, r : r + size, cc : cc + size, :]
        patch = np.clip(patch - lr * np.sign(gp), 0.0, 1.0)

    frozen = patch.copy()

    def apply(x, seed=0) -> np.ndarray:
        xb, single = _batch(x)
        r, cc = _positions(np.random.default_rng(seed), len(xb), xb.shape[1:3], size)
        out = _stamp_at(xb, frozen, r, cc)
        return out[0] if single else out

    return AdversarialPatch(frozen, apply)


def _square_fraction(p_init: float, i: int, iterations: int) -> float:
    progress = i / max(iterations, 1)
    return p_init / 2 ** sum(progress >= f for f in (0.1, 0.25, 0.5))


def square_attack(model, x, y, eps: float, iterations: int, p_init: float = 0.3, seed=0) -> np.ndarray:
    """Score-based L-inf random search with square-shaped updates.

    A candidate is kept only if it raises the cross-entropy, so the returned
    loss is never below the clean loss.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    fm = as_forward_model(model)
    xb, single = _batch(x)
    n, h, w, c = xb.shape
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    best = xb.copy()
    if iterations == 0 or eps == 0:
        return best[0] if single else best
    rng = np.random.default_rng(seed)
    best_loss = fm.loss(best, y)
    # vertical stripes of +-eps
    cand = project(xb + eps * rng.choice([-1.0, 1.0], size=(n, 1, w, c)), xb, eps)
    cand_loss = fm.loss(cand, y)
    take = cand_loss > best_loss
    best[take], best_loss[take] = cand[take], cand_loss[take]
    ii, jj = np.arange(h), np.arange(w)
    for i in range(iterations):
        s = int(round(math.sqrt(_square_fraction(p_init, i, iterations) * h * w)))
        s = min(max(s, 1), h, w)
        r0 = rng.integers(0, h - s + 1, size=n)
        c0 = rng.integers(0, w - s + 1, size=n)
        signs = eps * rng.choice([-1.0, 1.0], size=(n, 1, 1, c))
        in_rows = (ii[None, :] >= r0[:, None]) & (ii[None, :] < r0[:, None] + s)
        in_cols = (jj[None, :] >= c0[:, None]) & (jj[None, :] < c0[:, None] + s)
        window = (in_rows[:, :, None] & in_cols[:, None, :])[..., None]
        cand = project(xb + np.where(window, signs, best - xb), xb, eps)
        cand_loss = fm.loss(cand, y)
        take = cand_loss > best_loss
        best[take], best_loss[take] = cand[take], cand_loss[take]
    return best[0] if single else best


def transform_images(x: np.ndarray, angle_deg: float, dy: float, dx: float) -> np.ndarray:
    """Rotate about the image centre and translate; bilinear, zero padding."""
    xb, single = _batch(x)
    n, h, w, c = xb.shape
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    ci, cj = (h - 1) / 2, (w - 1) / 2
    oi, oj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: output (i, j) reads input at R^-1 (p - centre - shift) + centre
    pi, pj = oi - ci - dy, oj - cj - dx
    si = cos * pi + sin * pj + ci
    sj = -sin * pi + cos * pj + cj
    i0, j0 = np.floor(si).astype(int), np.floor(sj).astype(int)
    fi, fj = si - i0, sj - j0
    padded = np.zeros((n, h + 2, w + 2, c))
    padded[:, 1:-1, 1:-1] = xb

    def tap(ii, jj):
        ok = (ii >= -1) & (ii <= h) & (jj >= -1) & (jj <= w)
        vals = padded[:, np.clip(ii + 1, 0, h + 1), np.clip(jj + 1, 0, w + 1)]
        return np.where(ok[None, :, :, None], vals, 0.0)

    out = (
        tap(i0, j0) * ((1 - fi) * (1 - fj))[None, :, :, None]
        + tap(i0, j0 + 1) * ((1 - fi) * fj)[None, :, :, None]
        + tap(i0 + 1, j0) * (fi * (1 - fj))[None, :, :, None]
        + tap(i0 + 1, j0 + 1) * (fi * fj)[None, :, :, None]
    )
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def spatial_transform(
    model,
    x,
    y,
    rotations: Sequence[float] = (-30.0, -15.0, 0.0, 15.0, 30.0),
    translations: Sequence[int] = (-2, 0, 2),
) -> np.ndarray:
    """Per input, the grid transform with the highest cross-entropy."""
    if not len(rotations) or not len(translations):
        raise ValueError("rotation and translation grids must be non-empty")
    fm = as_forward_model(model)
    xb, single = _batch(x)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (len(xb),))
    best = None
    best_loss = np.full(len(xb), -np.inf)
    for angle in rotations:
        for dy in translations:
            for dx in translations:
                cand = transform_images(xb, angle, dy, dx)
                loss = fm.loss(cand, y)
                take = loss > best_loss
                if best is None:
                    best = cand.copy()
                best[take], best_loss[take] = cand[take], loss[take]
    return best[0] if single else best


def random_targets(y, num_classes: int, seed=0) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    return (y + rng.integers(1, num_classes, size=len(y))) % num_classes


def generate(model, cfg: ItaConfig, x, y) -> np.ndarray:
    """Adversarial counterpart of an evaluation set under ``cfg``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if cfg.kind == "FGSM":
        return fgsm(model, x, y, cfg.eps)
    if cfg.kind == "PGD":
        return pgd(model, x, y, cfg.eps, cfg.step_size, cfg.steps, cfg.random_start, cfg.seed)
    if cfg.kind == "JSMA":
        return jsma(model, x, random_targets(y, model.num_classes, cfg.seed), cfg.theta, cfg.gamma)
    if cfg.kind == "PATCH":
        ap = adversarial_patch(model, x, cfg.patch_size, cfg.patch_iterations, cfg.target, cfg.patch_lr, seed=cfg.seed)
        return ap.apply(x, cfg.seed + 1)
    if cfg.kind == "SQUARE":
        return square_attack(model.forward_only(), x, y, cfg.eps, cfg.iterations, cfg.p_init, cfg.seed)
    return spatial_transform(model.forward_only(), x, y, cfg.rotations, cfg.translations)
