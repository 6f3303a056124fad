"""Model-side defenses: neural cleanse on the global model and adversarial
training inside every client's local update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks.evasion import fgsm, pgd
from .datasets import Dataset
from .learner import (
    AdamState,
    BatchTransform,
    Classifier,
    ModelSpec,
    TrainingHyper,
    client_update,
    optimizer_step,
)

MAD_CONSISTENCY = 1.4826


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class ReversedTrigger:
    cls: int
    mask: np.ndarray
    pattern: np.ndarray
    l1_mask_norm: float
    success: float = 0.0
    lam: float = 0.0
    objective_history: list[tuple[int, float]] = field(default_factory=list)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (1.0 - self.mask) * x + self.mask * self.pattern


def _objective(model: Classifier, x, k, mask, pattern, lam) -> tuple[float, float]:
    stamped = (1.0 - mask) * x + mask * pattern
    y = np.full(len(x), k)
    ce = float(model.loss(stamped, y).mean())
    success = float(np.mean(model.predict(stamped) == k))
    return ce + lam * float(mask.sum()), success


def reverse_trigger(
    model: Classifier,
    clean_x,
    k: int,
    lam: float = 0.01,
    steps: int = 300,
    seed=0,
    lr: float = 0.1,
    check_every: int = 10,
) -> ReversedTrigger:
    """Smallest mask/pattern that sends clean inputs to class ``k``.

    Minimises mean cross-entropy towards ``k`` plus ``lam`` times the mask's
    L1 norm, with Adam on sigmoid-parameterised mask and pattern. Every
    ``check_every`` steps the full objective is evaluated; if it went up the
    optimiser rolls back to the last checkpoint and halves its step size, so
    recorded checkpoints never increase.
    """
    x = np.asarray(clean_x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("reverse_trigger needs a non-empty clean set")
    shape = x.shape[1:]
    rng = np.random.default_rng(seed)
    raw = np.concatenate([rng.uniform(-2.0, 0.0, size=shape).ravel(), rng.uniform(-1.0, 1.0, size=shape).ravel()])
    n = raw.size // 2
    y = np.full(len(x), k)

    def unpack(r):
        return _sigmoid(r[:n]).reshape(shape), _sigmoid(r[n:]).reshape(shape)

    mask, pattern = unpack(raw)
    obj, success = _objective(model, x, k, mask, pattern, lam)
    history = [(0, obj)]
    ckpt, ckpt_obj = raw.copy(), obj
    hyper = TrainingHyper(learning_rate=lr, optimizer="adam")
    state = AdamState.zeros(raw.size)
    for step in range(1, steps + 1):
        mask, pattern = unpack(raw)
        g = model.input_grad(mask * pattern + (1.0 - mask) * x, y)
        g_mask = (g * (pattern - x)).mean(axis=0) + lam
        g_pattern = g.mean(axis=0) * mask
        grad = np.concatenate([(g_mask * mask * (1 - mask)).ravel(), (g_pattern * pattern * (1 - pattern)).ravel()])
        raw, state = optimizer_step(raw, grad, hyper, state)
        if step % check_every == 0 or step == steps:
            obj, _ = _objective(model, x, k, *unpack(raw), lam)
            if obj <= ckpt_obj:
                ckpt, ckpt_obj = raw.copy(), obj
                history.append((step, obj))
            else:
                raw = ckpt.copy()
                hyper = replace(hyper, learning_rate=hyper.learning_rate / 2)
                state = AdamState.zeros(raw.size)
    mask, pattern = unpack(ckpt)
    _, success = _objective(model, x, k, mask, pattern, lam)
    return ReversedTrigger(k, mask, pattern, float(np.abs(mask).sum()), success, lam, history)


@dataclass
class AnomalyReport:
    norms: dict[int, float]
    median: float
    mad: float
    anomaly_index: dict[int, float]
    flagged: list[int]
    threshold: float

    def to_dict(self) -> dict:
        return {
            "norms": {str(k): v for k, v in sorted(self.norms.items())},
            "median": self.median,
            "mad": self.mad,
            "anomaly_index": {str(k): v for k, v in sorted(self.anomaly_index.items())},
            "flagged": list(self.flagged),
            "threshold": self.threshold,
        }


def detect_backdoor(triggers: list[ReversedTrigger], threshold: float = 2.0) -> AnomalyReport:
    """MAD outlier test on trigger norms; only unusually small norms are flagged."""
    if len(triggers) < 3:
        raise ValueError("backdoor detection needs at least 3 classes")
    norms = {t.cls: float(t.l1_mask_norm) for t in triggers}
    values = np.array(list(norms.values()))
    median = float(np.median(values))
    mad = MAD_CONSISTENCY * float(np.median(np.abs(values - median)))
    index = {}
    for k, v in norms.items():
        dev = abs(v - median)
        index[k] = 0.0 if dev == 0 else (dev / mad if mad > 0 else math.inf)
    flagged = sorted(k for k, v in norms.items() if v < median and index[k] > threshold)
    return AnomalyReport(norms, median, mad, index, flagged, threshold)


def unlearn_backdoor(
    spec: ModelSpec,
    params,
    clean: Dataset,
    triggers,
    hyper: TrainingHyper,
    seed=0,
    fraction: float = 0.2,
) -> np.ndarray:
    """Fine-tune on clean data where a ``fraction`` carries the reversed
    trigger(s) but keeps its true label."""
    if isinstance(triggers, ReversedTrigger):
        triggers = [triggers]
    if hyper.epochs == 0 or not triggers:
        return np.array(params, dtype=np.float64, copy=True)
    rng = np.random.default_rng(seed)
    count = min(len(clean), math.floor(fraction * len(clean) + 0.5))
    chosen = rng.choice(len(clean), size=count, replace=False)
    x = clean.x.copy()
    for i, idx in enumerate(np.array_split(chosen, len(triggers))):
        x[idx] = triggers[i].apply(x[idx])
    return client_update(spec, params, clean.replace(x=x), hyper, rng.integers(2**63))


@dataclass
class NeuralCleanseResult:
    params: np.ndarray
    report: AnomalyReport
    triggers: list[ReversedTrigger]


def neural_cleanse(
    spec: ModelSpec,
    params,
    clean: Dataset,
    hyper: TrainingHyper,
    lam: float = 0.01,
    steps: int = 300,
    threshold: float = 2.0,
    lam_trials: int = 3,
    success_target: float = 0.99,
    fraction: float = 0.2,
    seed=0,
) -> NeuralCleanseResult:
    """Reverse a trigger per class, flag outliers, unlearn the flagged ones.

    Per class, lambda doubles after a trial that reaches ``success_target``
    and halves after one that misses; the smallest successful mask wins.
    """
    model = Classifier(spec, params)
    triggers = []
    for k in range(spec.num_classes):
        lam_k = lam
        best = None
        fallback = None
        for trial in range(max(1, lam_trials)):
            trig = reverse_trigger(model, clean.x, k, lam_k, steps, seed=(seed, k, trial))
            if trig.success >= success_target:
                if best is None or trig.l1_mask_norm < best.l1_mask_norm:
                    best = trig
                lam_k *= 2
            else:
                if fallback is None or trig.success > fallback.success:
                    fallback = trig
                lam_k /= 2
        triggers.append(best if best is not None else fallback)
    report = detect_backdoor(triggers, threshold)
    flagged = [t for t in triggers if t.cls in report.flagged]
    new_params = unlearn_backdoor(spec, params, clean, flagged, hyper, seed, fraction)
    return NeuralCleanseResult(new_params, report, triggers)


@dataclass(frozen=True)
class AtConfig:
    generator: str = "PGD"
    eps: float = 0.3
    fraction: float = 0.5
    steps: int = 5
    alpha: float | None = None
    enabled: bool = True

    def __post_init__(self):
        if self.generator not in ("FGSM", "PGD"):
            raise ValueError(f"AT generator must be FGSM or PGD, got {self.generator!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"AT fraction must be in [0, 1], got {self.fraction}")
        if self.eps < 0:
            raise ValueError("AT eps must be >= 0")


def adversarial_count(fraction: float, batch: int) -> int:
    return min(batch, math.floor(fraction * batch + 0.5))


def adversarial_training_hook(cfg: AtConfig) -> BatchTransform | None:
    """Batch transform replacing the leading ``fraction`` of each minibatch by
    adversarial examples crafted against the client's current weights."""
    if not cfg.enabled:
        return None
    alpha = cfg.eps / 4 if cfg.alpha is None else cfg.alpha

    def transform(spec: ModelSpec, params, xb, yb):
        k = adversarial_count(cfg.fraction, len(xb))
        if k == 0 or cfg.eps == 0:
            return xb
        model = Classifier(spec, params)
        if cfg.generator == "FGSM":
            adv = fgsm(model, xb[:k], yb[:k], cfg.eps)
        else:
            adv = pgd(model, xb[:k], yb[:k], cfg.eps, alpha, cfg.steps)
        out = xb.copy()
        out[:k] = adv
        return out

    return transform
