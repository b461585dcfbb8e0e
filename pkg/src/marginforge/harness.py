"""Config-driven training runs and the three task sweeps.

A run is fully determined by (config, seed, dataset files): batch shuffling,
initialization, corruption, and attack sampling all derive from explicit
seeds. Data corruption (label flips, subsampling) applies to the training
split only and is keyed off the data seed, so every loss variant in a sweep
sees the same corrupted set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as data_mod
from .attack import AttackConfig, AttackResult, evaluate_attack, perturb_batch
from .autodiff import backward
from .data import Dataset
from .margin import (MarginConfig, MarginError, cross_entropy_loss, hinge_loss,
                     margin_loss_batch, mean_layer_distances)
from .net import Model, forward, model_from_dims, predict, save_model
from .optim import DivergenceError, OptimizerConfig, OptimizerState, step as optim_step


class ConfigError(Exception):
    pass


class TrainingDiverged(Exception):
    """Non-finite loss or gradient; carries the failing step and a report of
    everything logged up to the last good checkpoint."""

    def __init__(self, step_num: int, detail: str, report=None):
        self.step_num = step_num
        self.report = report
        super().__init__(f"training diverged at step {step_num}: {detail}")


# -- configuration -----------------------------------------------------------


@dataclass
class MarginSettings:
    p: float = float("inf")
    layers: str | list = "all"          # "all" | "input" | explicit index list
    gamma: float | dict = 1.0
    aggregator: str = "max"
    epsilon: float = 1e-6
    clip: float | None | str = "auto"
    top_k: int | None = None            # None -> n_classes - 1
    xent_weight: float = 1.0

    def resolve(self, model: Model) -> MarginConfig:
        if self.layers == "all":
            layers = tuple(range(model.n_captured_layers))
        elif self.layers == "input":
            layers = (0,)
        elif isinstance(self.layers, (list, tuple)):
            layers = tuple(int(l) for l in self.layers)
        else:
            raise ConfigError(f"margin layers must be 'all', 'input' or a list, "
                              f"got {self.layers!r}")
        gamma = ({int(k): float(v) for k, v in self.gamma.items()}
                 if isinstance(self.gamma, dict) else float(self.gamma))
        top_k = self.top_k if self.top_k is not None else model.n_classes - 1
        return MarginConfig(p=self.p, layers=layers, gamma=gamma,
                            aggregator=self.aggregator, epsilon=self.epsilon,
                            clip=self.clip, top_k=top_k, xent_weight=self.xent_weight)


@dataclass
class TaskConfig:
    kind: str = "plain"   # plain | noisy | generalization | adversarial | adv_train
    fractions: list = field(default_factory=list)
    attack: AttackConfig | None = None
    eps_list: list = field(default_factory=list)

    def validate(self) -> None:
        if self.kind not in ("plain", "noisy", "generalization", "adversarial", "adv_train"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "noisy" and any(not 0.0 <= f < 1.0 for f in self.fractions):
            raise ConfigError("noisy fractions must lie in [0, 1)")
        if self.kind == "generalization" and any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ConfigError("generalization fractions must lie in (0, 1]")
        if self.kind in ("adversarial", "adv_train") and self.attack is None:
            raise ConfigError(f"task {self.kind!r} requires an attack config")


@dataclass
class DataConfig:
    kind: str = "spiral"       # spiral | checkerboard | synthetic | idx
    seed: int = 99             # data seed, shared across runs of a sweep
    n_per_class: int = 100     # toy train size
    test_n_per_class: int = 500
    noise_sigma: float = 0.0   # toy jitter
    n_train: int = 10000       # synthetic sizes
    n_test: int = 2000
    glyph_noise: float = 0.12
    dir: str | None = None     # idx: directory with MNIST-style file names
    train_limit: int | None = None
    holdout: int = 0

    def validate(self) -> None:
        if self.kind not in ("spiral", "checkerboard", "synthetic", "idx"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "idx" and not self.dir:
            raise ConfigError("data kind 'idx' requires a directory")


@dataclass
class ExperimentConfig:
    model_dims: list
    loss: str = "cross_entropy"       # cross_entropy | hinge | margin
    margin: MarginSettings | None = None
    hinge_margin: float = 1.0
    hinge_xent_weight: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    steps: int = 1000
    batch_size: int = 64
    seed: int = 0
    task: TaskConfig = field(default_factory=TaskConfig)
    eval_every: int = 100
    distance_log_layers: list | str | None = None
    distance_p: float = 2.0
    loss_eval_cap: int = 1024
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        if len(self.model_dims) < 2:
            raise ConfigError(f"model_dims needs at least [in, out], got {self.model_dims}")
        if self.loss not in ("cross_entropy", "hinge", "margin"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if (self.loss == "margin") != (self.margin is not None):
            raise ConfigError("margin settings must be present iff loss == 'margin'")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        self.task.validate()
        self.data.validate()
        try:
            self.optimizer.validate()
        except Exception as e:
            raise ConfigError(str(e)) from None


def _p_to_json(p: float):
    return "inf" if p == float("inf") else p


def _p_from_json(p) -> float:
    if p in ("inf", "Infinity"):
        return float("inf")
    return float(p)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = {
        "model_dims": list(cfg.model_dims),
        "loss": cfg.loss,
        "margin": None,
        "hinge_margin": cfg.hinge_margin,
        "hinge_xent_weight": cfg.hinge_xent_weight,
        "optimizer": asdict(cfg.optimizer),
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "task": {
            "kind": cfg.task.kind,
            "fractions": list(cfg.task.fractions),
            "attack": asdict(cfg.task.attack) if cfg.task.attack else None,
            "eps_list": list(cfg.task.eps_list),
        },
        "eval_every": cfg.eval_every,
        "distance_log_layers": cfg.distance_log_layers,
        "distance_p": _p_to_json(cfg.distance_p),
        "loss_eval_cap": cfg.loss_eval_cap,
        "data": asdict(cfg.data),
    }
    if cfg.margin is not None:
        m = asdict(cfg.margin)
        m["p"] = _p_to_json(cfg.margin.p)
        d["margin"] = m
    if cfg.optimizer.lr_decay is not None:
        d["optimizer"]["lr_decay"] = list(cfg.optimizer.lr_decay)
    return d


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        margin = None
        if raw.get("margin") is not None:
            m = dict(raw["margin"])
            if "p" in m:
                m["p"] = _p_from_json(m["p"])
            margin = MarginSettings(**m)
        opt_raw = dict(raw.get("optimizer", {}))
        if opt_raw.get("lr_decay") is not None:
            opt_raw["lr_decay"] = (float(opt_raw["lr_decay"][0]), int(opt_raw["lr_decay"][1]))
        task_raw = dict(raw.get("task", {"kind": "plain"}))
        attack = None
        if task_raw.get("attack") is not None:
            a = dict(task_raw["attack"])
            if a.get("pixel_bounds") is not None:
                a["pixel_bounds"] = tuple(a["pixel_bounds"])
            attack = AttackConfig(**a)
        task = TaskConfig(kind=task_raw.get("kind", "plain"),
                          fractions=list(task_raw.get("fractions", [])),
                          attack=attack,
                          eps_list=list(task_raw.get("eps_list", [])))
        cfg = ExperimentConfig(
            model_dims=list(raw["model_dims"]),
            loss=raw.get("loss", "cross_entropy"),
            margin=margin,
            hinge_margin=float(raw.get("hinge_margin", 1.0)),
            hinge_xent_weight=float(raw.get("hinge_xent_weight", 1.0)),
            optimizer=OptimizerConfig(**opt_raw),
            steps=int(raw.get("steps", 1000)),
            batch_size=int(raw.get("batch_size", 64)),
            seed=int(raw.get("seed", 0)),
            task=task,
            eval_every=int(raw.get("eval_every", 100)),
            distance_log_layers=raw.get("distance_log_layers"),
            distance_p=_p_from_json(raw.get("distance_p", 2.0)),
            loss_eval_cap=int(raw.get("loss_eval_cap", 1024)),
            data=DataConfig(**raw.get("data", {})),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad experiment config: {e}") from None
    cfg.validate()
    return cfg


# -- datasets ----------------------------------------------------------------


@dataclass
class DataBundle:
    train: Dataset
    validation: Dataset
    test: Dataset


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0x7FFFFFFF for p in parts])
               .generate_state(1)[0])


def build_datasets(cfg: ExperimentConfig) -> DataBundle:
    d = cfg.data
    if d.kind in ("spiral", "checkerboard"):
        train = data_mod.toy_two_class(d.n_per_class, d.kind, d.noise_sigma, d.seed)
        test = data_mod.toy_two_class(d.test_n_per_class, d.kind, d.noise_sigma, d.seed + 1)
    elif d.kind == "synthetic":
        train = data_mod.synthetic_digit_dataset(d.n_train, d.seed, d.glyph_noise)
        test = data_mod.synthetic_digit_dataset(d.n_test, d.seed + 1, d.glyph_noise)
    else:
        import os
        train = data_mod.load_idx(os.path.join(d.dir, "train-images-idx3-ubyte"),
                                  os.path.join(d.dir, "train-labels-idx1-ubyte"))
        test = data_mod.load_idx(os.path.join(d.dir, "t10k-images-idx3-ubyte"),
                                 os.path.join(d.dir, "t10k-labels-idx1-ubyte"))
    if d.train_limit is not None and d.train_limit < len(train):
        train = data_mod.subsample(train, d.train_limit / len(train),
                                   _derived_seed(d.seed, 3))
    if d.holdout > 0:
        train, val = data_mod.split(train, d.holdout, _derived_seed(d.seed, 4))
    else:
        train, val = data_mod.split(train, 0, _derived_seed(d.seed, 4))
    return DataBundle(train, val, test)


# -- reports -----------------------------------------------------------------


@dataclass
class RunReport:
    config: dict
    metrics: list = field(default_factory=list)      # (step, split, accuracy, loss)
    distances: list = field(default_factory=list)    # (step, layer, mean_distance)
    attacks: list = field(default_factory=list)      # AttackResult
    wall_clock: float = 0.0
    best_step: int = 0
    best_val_accuracy: float = 0.0
    test_accuracy: float = 0.0
    model: Model | None = None

    def metric_series(self, split: str, column: str = "accuracy"):
        i = 2 if column == "accuracy" else 3
        return [(m[0], m[i]) for m in self.metrics if m[1] == split]

    def distance_series(self, layer: int):
        return [(s, v) for s, l, v in self.distances if l == layer]


# -- training ----------------------------------------------------------------


def _accuracy(model: Model, ds: Dataset, batch_size: int = 1024) -> float:
    if len(ds) == 0:
        return float("nan")
    hits = 0
    for start in range(0, len(ds), batch_size):
        tr = forward(model, ds.features[start:start + batch_size])
        hits += int(np.sum(predict(tr) == ds.labels[start:start + batch_size]))
    return hits / len(ds)


def _make_loss_builder(cfg: ExperimentConfig, model: Model):
    """Returns fn(model, trace, labels) -> (loss node, diagnostics or None)."""
    if cfg.loss == "cross_entropy":
        return lambda m, tr, y: (cross_entropy_loss(tr, y), None)
    if cfg.loss == "hinge":
        def build(m, tr, y):
            g = tr.graph
            node = hinge_loss(tr, y, cfg.hinge_margin)
            if cfg.hinge_xent_weight > 0:
                node = g.add(node, g.scale(cross_entropy_loss(tr, y),
                                           cfg.hinge_xent_weight))
            return node, None
        return build
    mcfg = cfg.margin.resolve(model)
    return lambda m, tr, y: margin_loss_batch(m, tr, y, mcfg)


def _loss_value(model, loss_builder, ds: Dataset, cap: int) -> float:
    if len(ds) == 0:
        return float("nan")
    x = ds.features[:cap]
    y = ds.labels[:cap]
    tr = forward(model, x)
    node, _ = loss_builder(model, tr, y)
    return float(tr.graph.value(node))


def _distance_layers(cfg: ExperimentConfig, model: Model):
    raw = cfg.distance_log_layers
    if raw is None:
        return None
    if raw == "all":
        return list(range(model.n_captured_layers))
    if raw == "input":
        return [0]
    return [int(l) for l in raw]


class _BatchSampler:
    """Seed-deterministic epoch shuffling with drop-last batches."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = None
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._perm is None or self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        out = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def train(cfg: ExperimentConfig, datasets: DataBundle) -> RunReport:
    """Run one training job and return its full report (model included)."""
    cfg.validate()
    t0 = time.perf_counter()
    model = model_from_dims(list(cfg.model_dims), cfg.seed)
    if datasets.train.dim != model.input_dim:
        raise ConfigError(f"model input dim {model.input_dim} does not match "
                          f"data dim {datasets.train.dim}")
    if int(datasets.train.n_classes) != model.n_classes:
        raise ConfigError(f"model has {model.n_classes} classes but data has "
                          f"{datasets.train.n_classes}")
    loss_builder = _make_loss_builder(cfg, model)
    dist_layers = _distance_layers(cfg, model)
    report = RunReport(config=config_to_dict(cfg))
    rng = np.random.default_rng(_derived_seed(cfg.seed, 11))
    sampler = _BatchSampler(len(datasets.train), cfg.batch_size, rng)
    state = OptimizerState()
    probe = datasets.train.take(np.arange(min(256, len(datasets.train))))
    adv_rng = np.random.default_rng(_derived_seed(cfg.seed, 12))

    best = {"step": -1, "acc": -1.0, "params": None}
    have_val = len(datasets.validation) > 0

    def evaluate(completed: int):
        for split, ds in (("train", datasets.train),
                          ("validation", datasets.validation),
                          ("test", datasets.test)):
            acc = _accuracy(model, ds)
            lv = _loss_value(model, loss_builder, ds, cfg.loss_eval_cap)
            report.metrics.append((completed, split, acc, lv))
        if dist_layers:
            means = mean_layer_distances(model, probe, dist_layers,
                                         cfg.distance_p, 1e-6)
            for l in dist_layers:
                report.distances.append((completed, l, means[l]))
        sel = report.metrics[-2][2] if have_val else report.metrics[-3][2]
        if sel > best["acc"]:
            best.update(step=completed, acc=sel,
                        params={k: v.copy() for k, v in model.params.items()})

    evaluate(0)
    for completed in range(1, cfg.steps + 1):
        idx = sampler.next_batch()
        xb = datasets.train.features[idx]
        yb = datasets.train.labels[idx]
        if cfg.task.kind == "adv_train":
            half = len(idx) // 2
            if half > 0:
                eps = cfg.task.attack.eps
                if cfg.task.eps_list:
                    eps = float(adv_rng.choice(cfg.task.eps_list))
                xb = xb.copy()
                xb[half:] = perturb_batch(cfg.task.attack, model, xb[half:],
                                          yb[half:], eps,
                                          seed=_derived_seed(cfg.seed, 13, completed))
        trace = forward(model, xb)
        loss_node, _ = loss_builder(model, trace, yb)
        loss_val = float(trace.graph.value(loss_node))
        if not np.isfinite(loss_val):
            report.wall_clock = time.perf_counter() - t0
            _restore_best(model, best, report)
            raise TrainingDiverged(completed, f"loss = {loss_val}", report)
        grads_map = backward(trace.graph, loss_node)
        grads = {name: grads_map.get(nid) for name, nid in trace.param_nodes.items()}
        try:
            model.params, state = optim_step(model.params, grads, state, cfg.optimizer)
        except DivergenceError as e:
            report.wall_clock = time.perf_counter() - t0
            _restore_best(model, best, report)
            raise TrainingDiverged(completed, str(e), report) from e
        if completed % cfg.eval_every == 0:
            evaluate(completed)

    _restore_best(model, best, report)
    report.test_accuracy = _accuracy(model, datasets.test)
    report.model = model

    if cfg.task.kind == "adversarial":
        eps_list = cfg.task.eps_list or [cfg.task.attack.eps]
        report.attacks.append(evaluate_attack(
            model, model, datasets.test, cfg.task.attack, eps_list,
            seed=_derived_seed(cfg.seed, 14),
            source_name=cfg.loss, target_name=cfg.loss))
    report.wall_clock = time.perf_counter() - t0
    return report


def _restore_best(model: Model, best: dict, report: RunReport) -> None:
    if best["params"] is not None:
        model.params = best["params"]
        report.best_step = best["step"]
        report.best_val_accuracy = best["acc"]
    report.model = model


# -- sweeps ------------------------------------------------------------------


def sweep_noise(base_cfg: ExperimentConfig, fractions, seeds, datasets=None):
    """One run per (label-flip fraction, seed); corruption on train split only."""
    datasets = datasets or build_datasets(base_cfg)
    out = []
    for fraction in fractions:
        flip_seed = _derived_seed(base_cfg.data.seed, 1, round(fraction * 10**6))
        corrupted = DataBundle(
            data_mod.flip_labels(datasets.train, fraction, flip_seed),
            datasets.validation, datasets.test)
        for seed in seeds:
            cfg = config_from_dict(config_to_dict(base_cfg))
            cfg.seed = int(seed)
            report = train(cfg, corrupted)
            out.append((float(fraction), int(seed), report))
    return out


def sweep_generalization(base_cfg: ExperimentConfig, fractions, seeds, datasets=None):
    """One run per (training-set fraction, seed); subset shared across losses."""
    datasets = datasets or build_datasets(base_cfg)
    out = []
    for fraction in fractions:
        sub_seed = _derived_seed(base_cfg.data.seed, 2, round(fraction * 10**6))
        reduced = DataBundle(
            data_mod.subsample(datasets.train, fraction, sub_seed),
            datasets.validation, datasets.test)
        for seed in seeds:
            cfg = config_from_dict(config_to_dict(base_cfg))
            cfg.seed = int(seed)
            report = train(cfg, reduced)
            out.append((float(fraction), int(seed), report))
    return out


def sweep_adversarial(trained_models, attack_config: AttackConfig, eps_list,
                      test: Dataset, seed: int = 0):
    """White-box table per model plus black-box tables per ordered pair."""
    if not trained_models:
        raise ConfigError("sweep_adversarial needs at least one trained model")
    results = []
    for name, model in trained_models:
        results.append(evaluate_attack(model, model, test, attack_config, eps_list,
                                       seed=seed, source_name=name, target_name=name))
    for sname, source in trained_models:
        for tname, target in trained_models:
            if sname == tname:
                continue
            results.append(evaluate_attack(source, target, test, attack_config,
                                           eps_list, seed=seed,
                                           source_name=sname, target_name=tname))
    return results
