"""Input perturbations: gradient-sign attacks and Gaussian noise.

Attack gradients are taken on their own loss graph (cross-entropy unless the
caller passes a different builder), independent of whatever loss trained the
model. Gradient-sign perturbations stay inside the l-infinity ball of radius
eps exactly, by construction for the single step and by clipping for the
iterated variant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward
from .margin import cross_entropy_loss
from .net import Model, forward, predict


class AttackError(Exception):
    pass


@dataclass
class AttackConfig:
    kind: str = "ifgsm"                 # fgsm | ifgsm | gaussian
    eps: float = 0.1
    alpha: float | None = None          # ifgsm step; defaults to eps / 4
    iters: int = 10                     # ifgsm iterations
    sigma: float = 0.0                  # gaussian only
    pixel_bounds: tuple[float, float] | None = None

    def validate(self) -> None:
        if self.kind not in ("fgsm", "ifgsm", "gaussian"):
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.eps < 0:
            raise AttackError(f"eps must be non-negative, got {self.eps}")
        if self.kind == "ifgsm":
            a = self.step_size()
            if a <= 0:
                raise AttackError(f"alpha must be positive, got {a}")
            if self.iters * a < self.eps:
                raise AttackError(
                    f"iters * alpha = {self.iters * a} cannot reach eps = {self.eps}")
        if self.sigma < 0:
            raise AttackError(f"sigma must be non-negative, got {self.sigma}")

    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else self.eps / 4.0


@dataclass
class AttackResult:
    kind: str
    source: str
    target: str
    clean_accuracy: float
    rows: list[tuple[float, float]]                 # (eps, accuracy)
    perturbed: dict[float, np.ndarray] = field(default_factory=dict)

    def accuracy_at(self, eps: float) -> float:
        for e, acc in self.rows:
            if e == eps:
                return acc
        raise KeyError(f"no row for eps={eps}")

    def write_csv(self, path, append: bool = False) -> None:
        with open(path, "a" if append else "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if not append:
                w.writerow(["eps", "source", "target", "attack_kind", "accuracy"])
            for e, acc in self.rows:
                w.writerow([repr(float(e)), self.source, self.target, self.kind, repr(acc)])


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray, loss_fn=None) -> np.ndarray:
    """Gradient of the attack loss w.r.t. the input batch."""
    loss_fn = loss_fn or cross_entropy_loss
    trace = forward(model, x)
    loss = loss_fn(trace, y)
    grads = backward(trace.graph, loss, wrt=[trace.layer_nodes[0]])
    g = grads.get(trace.layer_nodes[0])
    return g if g is not None else np.zeros_like(np.asarray(x, dtype=np.float64))


def _clamp(x_hat: np.ndarray, pixel_bounds) -> np.ndarray:
    if pixel_bounds is None:
        return x_hat
    lo, hi = pixel_bounds
    return np.clip(x_hat, lo, hi)


def _project_linf_ball(x_hat: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Make |x_hat - x| <= eps hold exactly in float arithmetic.

    fl(x + eps) - x can exceed eps by an ulp; walk any offending element back
    toward x until the computed difference satisfies the bound.
    """
    over = np.abs(x_hat - x) > eps
    while np.any(over):
        x_hat = np.where(over, np.nextafter(x_hat, x), x_hat)
        over = np.abs(x_hat - x) > eps
    return x_hat


def fgsm(model: Model, loss_fn, x: np.ndarray, y: np.ndarray, eps: float,
         pixel_bounds=None) -> np.ndarray:
    """Single gradient-sign step: x + eps * sign(grad_x loss); sign(0) = 0."""
    if eps < 0:
        raise AttackError(f"eps must be non-negative, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    if eps == 0.0:
        return x.copy()
    g = input_gradient(model, x, y, loss_fn)
    return _project_linf_ball(_clamp(x + eps * np.sign(g), pixel_bounds), x, eps)


def ifgsm(model: Model, loss_fn, x: np.ndarray, y: np.ndarray, eps: float,
          alpha: float, iters: int, pixel_bounds=None) -> np.ndarray:
    """Iterated gradient-sign steps of size alpha, clipped to the eps ball."""
    if eps < 0:
        raise AttackError(f"eps must be non-negative, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    if eps == 0.0:
        return x.copy()
    lo, hi = x - eps, x + eps
    x_hat = x.copy()
    for _ in range(iters):
        g = input_gradient(model, x_hat, y, loss_fn)
        x_hat = np.clip(x_hat + alpha * np.sign(g), lo, hi)
        x_hat = _clamp(x_hat, pixel_bounds)
    return _project_linf_ball(x_hat, x, eps)


def gaussian_perturb(x: np.ndarray, sigma: float, seed: int, pixel_bounds=None) -> np.ndarray:
    """Elementwise i.i.d. Gaussian noise, seed-deterministic."""
    if sigma < 0:
        raise AttackError(f"sigma must be non-negative, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0.0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return _clamp(x + rng.normal(0.0, sigma, size=x.shape), pixel_bounds)


def perturb_batch(config: AttackConfig, source: Model, x: np.ndarray, y: np.ndarray,
                  eps: float, loss_fn=None, seed: int = 0) -> np.ndarray:
    """Generate adversarial (or noisy) inputs for one batch at one eps level."""
    if config.kind == "fgsm":
        return fgsm(source, loss_fn, x, y, eps, config.pixel_bounds)
    if config.kind == "ifgsm":
        alpha = config.alpha if config.alpha is not None else eps / 4.0
        return ifgsm(source, loss_fn, x, y, eps, alpha, config.iters, config.pixel_bounds)
    if config.kind == "gaussian":
        return gaussian_perturb(x, eps, seed, config.pixel_bounds)
    raise AttackError(f"unknown attack kind {config.kind!r}")


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> float:
    y = np.asarray(y)
    hits = 0
    for start in range(0, x.shape[0], batch_size):
        pred = predict(forward(model, x[start:start + batch_size]))
        hits += int(np.sum(pred == y[start:start + batch_size]))
    return hits / x.shape[0]


def evaluate_attack(source_model: Model, target_model: Model, dataset,
                    config: AttackConfig, eps_list, loss_fn=None, seed: int = 0,
                    batch_size: int = 256, keep_examples: bool = False,
                    source_name: str = "source", target_name: str = "target") -> AttackResult:
    """Perturb with gradients from source_model, score accuracy on target_model.

    White-box when source and target are the same model. For gaussian attacks
    the eps values are noise standard deviations.
    """
    if source_model.input_dim != target_model.input_dim or \
            source_model.n_classes != target_model.n_classes:
        raise AttackError("source and target models have mismatched dimensions")
    config.validate()
    x = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels)
    clean = accuracy(target_model, x, y)
    rows = []
    perturbed: dict[float, np.ndarray] = {}
    for eps in eps_list:
        if eps == 0.0:
            x_hat = x
        else:
            chunks = []
            for start in range(0, x.shape[0], batch_size):
                chunks.append(perturb_batch(config, source_model,
                                            x[start:start + batch_size],
                                            y[start:start + batch_size],
                                            eps, loss_fn, seed=seed + start))
            x_hat = np.vstack(chunks)
        rows.append((float(eps), accuracy(target_model, x_hat, y)))
        if keep_examples:
            perturbed[float(eps)] = x_hat
    return AttackResult(config.kind, source_name, target_name, clean, rows, perturbed)
