"""Distance-to-boundary margin losses, baselines, and distance diagnostics.

The central quantity is the linearized distance of a sample to the decision
boundary between two classes: |f_i - f_j| divided by the dual norm of the
gradient difference, measured at any captured layer. The batch margin loss
hinges that distance against a per-layer target gamma, with the denominator
held constant for backpropagation and recomputed every forward pass.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import backward
from .net import Dense, Model, ForwardTrace, forward, class_layer_grads

INF = math.inf


class MarginError(Exception):
    """Invalid margin configuration or arguments."""


class InfeasibleError(MarginError):
    """No displacement can satisfy the boundary constraint."""


class NoBoundaryInWindow(MarginError):
    """Grid search found no score sign change inside the search window."""


def dual_exponent(p: float) -> float:
    """Dual of an l_p norm exponent: 1 <-> inf, 2 -> 2."""
    if p == 1:
        return INF
    if p == 2:
        return 2.0
    if p == INF:
        return 1.0
    raise MarginError(f"norm exponent must be 1, 2 or inf, got {p!r}")


def lp_norm(v: np.ndarray, p: float, axis=None) -> np.ndarray:
    if p == 1:
        return np.sum(np.abs(v), axis=axis)
    if p == 2:
        return np.sqrt(np.sum(v * v, axis=axis))
    if p == INF:
        return np.max(np.abs(v), axis=axis)
    raise MarginError(f"norm exponent must be 1, 2 or inf, got {p!r}")


def hyperplane_distance(a: np.ndarray, b: float, p: float) -> float:
    """Minimum ||delta||_p subject to a.delta = b, i.e. |b| / ||a||_q."""
    a = np.asarray(a, dtype=np.float64)
    na = float(lp_norm(a, dual_exponent(p)))
    if na == 0.0:
        if b == 0.0:
            return 0.0
        raise InfeasibleError(f"a = 0 with b = {b}: constraint unsatisfiable")
    return abs(float(b)) / na


@dataclass(frozen=True)
class PairDistance:
    sample: int
    class_i: int
    class_y: int
    layer: int
    numerator: float      # f_i - f_y, signed
    denominator: float    # dual-norm of the layer-gradient difference
    distance: float       # |numerator| / (epsilon + denominator)


class PairDistanceTable:
    """Columnar store of PairDistance rows, serializable to CSV."""

    COLUMNS = ["step", "sample", "layer", "class_i", "class_y",
               "numerator", "denominator", "distance"]

    def __init__(self, sample, class_i, class_y, layer, numerator, denominator, distance):
        self.sample = np.asarray(sample, dtype=np.intp)
        self.class_i = np.asarray(class_i, dtype=np.intp)
        self.class_y = np.asarray(class_y, dtype=np.intp)
        self.layer = np.asarray(layer, dtype=np.intp)
        self.numerator = np.asarray(numerator, dtype=np.float64)
        self.denominator = np.asarray(denominator, dtype=np.float64)
        self.distance = np.asarray(distance, dtype=np.float64)

    def __len__(self):
        return self.sample.size

    def rows(self):
        for t in range(len(self)):
            yield PairDistance(int(self.sample[t]), int(self.class_i[t]),
                               int(self.class_y[t]), int(self.layer[t]),
                               float(self.numerator[t]), float(self.denominator[t]),
                               float(self.distance[t]))

    def write_csv(self, path, step: int = 0, append: bool = False) -> None:
        mode = "a" if append else "w"
        with open(path, mode, newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if not append:
                w.writerow(self.COLUMNS)
            for t in range(len(self)):
                w.writerow([step, int(self.sample[t]), int(self.layer[t]),
                            int(self.class_i[t]), int(self.class_y[t]),
                            repr(float(self.numerator[t])), repr(float(self.denominator[t])),
                            repr(float(self.distance[t]))])


@dataclass
class MarginConfig:
    """Knobs for the multi-layer margin loss.

    gamma may be a single float shared by every layer or a {layer: value}
    mapping. clip="auto" resolves to 10x the largest gamma; None disables
    clipping. top_k counts the rival classes scored per sample.
    """
    p: float = INF
    layers: tuple = (0,)
    gamma: float | dict = 1.0
    aggregator: str = "max"
    epsilon: float = 1e-6
    clip: float | None | str = "auto"
    top_k: int = 1
    xent_weight: float = 1.0

    def gamma_for(self, layer: int) -> float:
        if isinstance(self.gamma, dict):
            try:
                return float(self.gamma[layer])
            except KeyError:
                raise MarginError(f"no gamma configured for layer {layer}") from None
        return float(self.gamma)

    def clip_value(self) -> float | None:
        if self.clip == "auto":
            gammas = (self.gamma.values() if isinstance(self.gamma, dict) else [self.gamma])
            return 10.0 * max(float(g) for g in gammas)
        return None if self.clip is None else float(self.clip)

    def validate(self, n_classes: int, n_captured_layers: int) -> None:
        dual_exponent(self.p)
        if not self.layers:
            raise MarginError("margin layer set is empty")
        for l in self.layers:
            if not 0 <= l < n_captured_layers:
                raise MarginError(f"layer {l} not captured (have {n_captured_layers})")
            if self.gamma_for(l) <= 0:
                raise MarginError(f"gamma for layer {l} must be positive")
        if self.aggregator not in ("max", "sum"):
            raise MarginError(f"aggregator must be 'max' or 'sum', got {self.aggregator!r}")
        if self.epsilon <= 0:
            raise MarginError(f"epsilon must be positive, got {self.epsilon}")
        if not 1 <= self.top_k <= n_classes - 1:
            raise MarginError(f"top_k must be in [1, {n_classes - 1}], got {self.top_k}")
        if self.xent_weight < 0:
            raise MarginError(f"xent_weight must be non-negative, got {self.xent_weight}")
        c = self.clip_value()
        if c is not None and c <= 0:
            raise MarginError(f"clip threshold must be positive, got {c}")


def margin_pair_penalty(num: float, den: float, gamma: float, eps: float) -> float:
    """Hinge on the signed normalized score gap: max{0, gamma + num/(eps+den)}."""
    guard = eps + den
    if guard > 0.0:
        ratio = num / guard
    else:
        ratio = 0.0 if num == 0.0 else math.copysign(INF, num)
    return max(0.0, gamma + ratio)


def aggregate(penalties, aggregator: str) -> float:
    vals = list(penalties)
    if not vals:
        raise MarginError("cannot aggregate an empty penalty list")
    if aggregator == "max":
        return max(vals)
    if aggregator == "sum":
        return sum(vals)
    raise MarginError(f"aggregator must be 'max' or 'sum', got {aggregator!r}")


def approx_distance(trace: ForwardTrace, sample: int, class_i: int, class_j: int,
                    layer: int, p: float, eps: float) -> PairDistance:
    """Linearized distance of one sample to the (i, j) boundary at one layer."""
    if class_i == class_j:
        raise MarginError("class_i and class_j must differ")
    logits = trace.logits_value
    num = float(logits[sample, class_i] - logits[sample, class_j])
    g = trace.graph
    fi = g.select(trace.logits_node, [sample], [class_i])
    fj = g.select(trace.logits_node, [sample], [class_j])
    diff = g.reduce_sum(g.subtract(fi, fj))
    target = trace.layer_nodes[layer]
    grads = backward(g, diff, wrt=[target])
    got = grads.get(target)
    row = got[sample] if got is not None else np.zeros(g.value(target).shape[1])
    den = float(lp_norm(row, dual_exponent(p)))
    guard = eps + den
    if num == 0.0:
        dist = 0.0
    elif guard > 0.0:
        dist = abs(num) / guard
    else:
        dist = INF
    return PairDistance(sample, class_i, class_j, layer, num, den, dist)


def _top_rivals(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Per sample, the k classes != label with highest logit; ties to lower index."""
    b, n = logits.shape
    order = np.argsort(-logits, axis=1, kind="stable")
    keep = order != labels[:, None]
    return order[keep].reshape(b, n - 1)[:, :k]


def _rival_denominators(trace: ForwardTrace, labels: np.ndarray, rivals: np.ndarray,
                        layers, q: float) -> dict[int, np.ndarray]:
    """Dual-norm gradient-difference magnitudes, [batch, k] per layer.

    One backward pass per distinct class involved; the denominators are plain
    numbers, deliberately outside the differentiable graph.
    """
    b, k = rivals.shape
    classes = np.unique(np.concatenate([rivals.ravel(), labels]))
    per_class = {int(c): class_layer_grads(trace, int(c), list(layers)) for c in classes}
    posmap = np.full(int(classes.max()) + 1, -1)
    posmap[classes] = np.arange(classes.size)
    rows = np.arange(b)
    dens = {}
    for l in layers:
        stack = np.stack([per_class[int(c)][l] for c in classes])     # [C, b, d]
        g_y = stack[posmap[labels], rows]                             # [b, d]
        g_i = stack[posmap[rivals], rows[:, None]]                    # [b, k, d]
        dens[l] = lp_norm(g_i - g_y[:, None, :], q, axis=2)
    return dens


def margin_loss_batch(model: Model, trace: ForwardTrace, labels: np.ndarray,
                      config: MarginConfig):
    """Multi-layer margin loss over a batch.

    Per sample: score the top_k rival classes, hinge gamma_l plus the
    normalized (frozen-denominator) score gap at every configured layer,
    aggregate over rivals, clip, sum layers, average the batch, and add
    xent_weight times the cross-entropy. Returns (scalar node id, diagnostics
    table); the node differentiates w.r.t. parameters through numerators only.
    """
    labels = np.asarray(labels, dtype=np.intp)
    logits = trace.logits_value
    b, n = logits.shape
    config.validate(n, len(trace.layer_nodes))
    q = dual_exponent(config.p)
    rivals = _top_rivals(logits, labels, config.top_k)                # [b, k]
    dens = _rival_denominators(trace, labels, rivals, config.layers, q)

    g = trace.graph
    rows = np.broadcast_to(np.arange(b)[:, None], rivals.shape)
    ycols = np.broadcast_to(labels[:, None], rivals.shape)
    num_node = g.subtract(g.select(trace.logits_node, rows, rivals),
                          g.select(trace.logits_node, rows, ycols))   # [b, k]
    num_val = logits[rows, rivals] - logits[rows, ycols]

    clip = config.clip_value()
    total = None
    diag_layers, diag_num, diag_den = [], [], []
    for l in config.layers:
        den = dens[l]
        coeff = g.constant(1.0 / (config.epsilon + den))
        gamma_node = g.constant(config.gamma_for(l))
        pen = g.relu(g.add(gamma_node, g.multiply(num_node, coeff)))  # [b, k]
        if config.aggregator == "max":
            term = g.reduce_max(pen, axis=1)
        else:
            term = g.reduce_sum(pen, axis=1)
        if clip is not None:
            c = g.constant(clip)
            term = g.subtract(c, g.relu(g.subtract(c, term)))
        total = term if total is None else g.add(total, term)
        diag_layers.append(np.full(num_val.size, l))
        diag_num.append(num_val.ravel())
        diag_den.append(den.ravel())

    loss = g.scale(g.reduce_sum(total), 1.0 / b)
    if config.xent_weight > 0.0:
        loss = g.add(loss, g.scale(cross_entropy_loss(trace, labels), config.xent_weight))

    den_all = np.concatenate(diag_den)
    num_all = np.concatenate(diag_num)
    table = PairDistanceTable(
        sample=np.tile(rows.ravel(), len(config.layers)),
        class_i=np.tile(rivals.ravel(), len(config.layers)),
        class_y=np.tile(ycols.ravel(), len(config.layers)),
        layer=np.concatenate(diag_layers),
        numerator=num_all,
        denominator=den_all,
        distance=np.where(num_all == 0.0, 0.0,
                          np.abs(num_all) / (config.epsilon + den_all)),
    )
    return loss, table


def cross_entropy_loss(trace: ForwardTrace, labels: np.ndarray):
    """Mean over the batch of logsumexp(logits) - logit_true (max-stabilized)."""
    labels = np.asarray(labels, dtype=np.intp)
    g = trace.graph
    b = trace.batch_size
    lse = g.logsumexp(trace.logits_node)                              # [b]
    true = g.select(trace.logits_node, np.arange(b), labels)          # [b]
    return g.scale(g.reduce_sum(g.subtract(lse, true)), 1.0 / b)


def hinge_loss(trace: ForwardTrace, labels: np.ndarray, margin: float = 1.0):
    """Mean multiclass output-space hinge: sum_{i != y} max{0, m + f_i - f_y}."""
    if margin <= 0:
        raise MarginError(f"hinge margin must be positive, got {margin}")
    labels = np.asarray(labels, dtype=np.intp)
    g = trace.graph
    b, n = trace.logits_value.shape
    rows = np.broadcast_to(np.arange(b)[:, None], (b, n))
    ycols = np.broadcast_to(labels[:, None], (b, n))
    f_y = g.select(trace.logits_node, rows, ycols)                    # [b, n]
    viol = g.relu(g.add(g.constant(margin), g.subtract(trace.logits_node, f_y)))
    # the i == y entry contributes exactly margin per sample; remove it
    return g.add(g.scale(g.reduce_sum(viol), 1.0 / b), g.constant(-margin))


def mean_layer_distances(model: Model, dataset, layers, p: float, eps: float,
                         batch_size: int = 256) -> dict[int, float]:
    """Mean linearized distance per layer, true class vs top-scoring rival."""
    features = np.asarray(dataset.features, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.intp)
    if features.shape[0] == 0:
        raise MarginError("dataset is empty")
    q = dual_exponent(p)
    layers = list(layers)
    sums = {l: 0.0 for l in layers}
    for start in range(0, features.shape[0], batch_size):
        xb = features[start:start + batch_size]
        yb = labels[start:start + batch_size]
        trace = forward(model, xb)
        rivals = _top_rivals(trace.logits_value, yb, 1)               # [b, 1]
        dens = _rival_denominators(trace, yb, rivals, layers, q)
        num = (trace.logits_value[np.arange(len(yb)), rivals[:, 0]]
               - trace.logits_value[np.arange(len(yb)), yb])
        for l in layers:
            den = dens[l][:, 0]
            d = np.where(num == 0.0, 0.0, np.abs(num) / (eps + den))
            sums[l] += float(np.sum(d))
    return {l: sums[l] / features.shape[0] for l in layers}


def svm_margin_check(w: np.ndarray, b: float, points) -> tuple[float, float]:
    """Linear binary case: margin from the layer-distance formula vs |w.x+b|/||w||2.

    Builds the two-class linear model f_0 = w.x + b, f_1 = 0 and takes the
    minimum input-layer distance over the dataset with p = 2, eps = 0.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w):
        raise MarginError("w must be nonzero")
    if hasattr(points, "features"):
        points = points.features
    points = np.asarray(points, dtype=np.float64)
    d = w.size
    weights = np.zeros((d, 2))
    weights[:, 0] = w
    model = Model([Dense(d, 2)], {"W0": weights, "b0": np.array([float(b), 0.0])}, 2, seed=0)
    trace = forward(model, points)
    gamma_formula = min(
        approx_distance(trace, k, 0, 1, layer=0, p=2.0, eps=0.0).distance
        for k in range(points.shape[0]))
    gamma_analytic = float(np.min(np.abs(points @ w + b)) / np.linalg.norm(w))
    return gamma_formula, gamma_analytic


def _pair_scores(model: Model, pts: np.ndarray, class_i: int, class_j: int) -> np.ndarray:
    lv = forward(model, pts).logits_value
    return lv[:, class_i] - lv[:, class_j]


def exact_distance_oracle_2d(model: Model, x: np.ndarray, class_i: int, class_j: int,
                             p: float, half_extent: float = 2.0, grid_n: int = 161,
                             refine_iters: int = 40, zoom_passes: int = 3) -> float:
    """Brute-force distance to the (i, j) boundary for 2-D inputs.

    Scans a square grid around x for sign changes of f_i - f_j along grid
    edges, bisects each crossing edge, and takes the minimum ||z - x||_p over
    the crossing points. Successive passes zoom a fresh grid onto the best
    crossing, shrinking the resolution error geometrically. The result
    upper-bounds the true distance to within the final grid cell diagonal.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != 2 or model.input_dim != 2:
        raise MarginError("oracle requires 2-D inputs")

    def crossings(center, half, n):
        gx = np.linspace(center[0] - half, center[0] + half, n)
        gy = np.linspace(center[1] - half, center[1] + half, n)
        xx, yy = np.meshgrid(gx, gy, indexing="ij")
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        s = _pair_scores(model, pts, class_i, class_j).reshape(n, n)
        a_list, b_list = [], []
        for (s0, s1, p0, p1) in [
            (s[:-1, :], s[1:, :], (xx[:-1, :], yy[:-1, :]), (xx[1:, :], yy[1:, :])),
            (s[:, :-1], s[:, 1:], (xx[:, :-1], yy[:, :-1]), (xx[:, 1:], yy[:, 1:])),
        ]:
            hit = (np.sign(s0) != np.sign(s1)) | (s0 == 0) | (s1 == 0)
            a_list.append(np.column_stack([p0[0][hit], p0[1][hit]]))
            b_list.append(np.column_stack([p1[0][hit], p1[1][hit]]))
        return np.vstack(a_list), np.vstack(b_list)

    def bisect(a_pts, b_pts):
        sa = _pair_scores(model, a_pts, class_i, class_j)
        for _ in range(refine_iters):
            mid = 0.5 * (a_pts + b_pts)
            sm = _pair_scores(model, mid, class_i, class_j)
            left = np.sign(sa) != np.sign(sm)
            b_pts = np.where(left[:, None], mid, b_pts)
            keep_a = ~left
            a_pts = np.where(keep_a[:, None], mid, a_pts)
            sa = np.where(keep_a, sm, sa)
        return 0.5 * (a_pts + b_pts)

    best = INF
    center, half = x.copy(), float(half_extent)
    for _ in range(max(1, zoom_passes)):
        a_pts, b_pts = crossings(center, half, grid_n)
        if a_pts.shape[0] == 0:
            if best < INF:
                break
            raise NoBoundaryInWindow(
                f"no boundary within +/-{half_extent} of {x.tolist()} "
                f"for classes ({class_i}, {class_j})")
        pts = bisect(a_pts, b_pts)
        dists = lp_norm(pts - x, p, axis=1)
        k = int(np.argmin(dists))
        if dists[k] < best:
            best = float(dists[k])
            center = pts[k]
        cell = 2.0 * half / (grid_n - 1)
        half = 2.5 * cell
    return best
