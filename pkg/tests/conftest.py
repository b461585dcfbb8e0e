"""Shared test oracles, all independent of the library's graph machinery.

The straight-line evaluator re-implements dense/ReLU forward passes and
per-class layer gradients directly from the chain rule with plain numpy, so
gradient and loss checks never route through the code under test.
"""

import numpy as np
import pytest


def straight_forward(params, x):
    """Captured activations [h0, post-relu..., logits] for a dense/ReLU stack.

    params: list of (W, b) pairs; ReLU between consecutive pairs, none after
    the last. Dtype-preserving, so oracles can run in extended precision.
    """
    L = len(params)
    h = np.asarray(x)
    captured = [h]
    for t, (W, b) in enumerate(params, start=1):
        z = h @ W + b
        h = np.maximum(z, 0.0) if t < L else z
        captured.append(h)
    return captured


def straight_class_grads(params, x, class_i):
    """(captured, grads): grads[l] is d f_i(x_b) / d h_l[b], per sample."""
    L = len(params)
    h = np.asarray(x)
    hs, zs = [h], []
    for t, (W, b) in enumerate(params, start=1):
        z = hs[-1] @ W + b
        zs.append(z)
        hs.append(np.maximum(z, 0.0) if t < L else z)
    grads = [None] * (L + 1)
    g = np.zeros_like(hs[L])
    g[:, class_i] = 1.0
    grads[L] = g
    for t in range(L, 0, -1):
        gz = grads[t] if t == L else grads[t] * (zs[t - 1] > 0.0)
        grads[t - 1] = gz @ params[t - 1][0].T
    return hs, grads


def as_longdouble(params):
    """Cast a {name: array} dict (or (W, b) list) to 80-bit extended precision."""
    if isinstance(params, dict):
        return {k: np.asarray(v, dtype=np.longdouble) for k, v in params.items()}
    return [(np.asarray(W, dtype=np.longdouble), np.asarray(b, dtype=np.longdouble))
            for W, b in params]


def model_param_list(model):
    """[(W, b), ...] view of a Model's parameters in layer order."""
    out = []
    for li, spec in enumerate(model.layers):
        if f"W{li}" in model.params:
            W = model.params[f"W{li}"]
            b = model.params.get(f"b{li}", np.zeros(W.shape[1]))
            out.append((W, b))
    return out


_FD_ULPS = 16.0  # differences below this many ulps of f are measurement noise


def _stencil(fn_at, h):
    """4th-order central difference with step h, with a resolution floor.

    Combined with extended-precision loss evaluation this resolves gradient
    components down to ~1e-12 of the loss scale; differences below the
    floating-point resolution of the evaluations snap to exactly zero.
    """
    f_p2, f_p1, f_m1, f_m2 = fn_at(2 * h), fn_at(h), fn_at(-h), fn_at(-2 * h)
    num = -f_p2 + 8.0 * f_p1 - 8.0 * f_m1 + f_m2
    eps = float(np.finfo(np.asarray(f_p1).dtype).eps)
    scale = abs(f_p2) + 8.0 * abs(f_p1) + 8.0 * abs(f_m1) + abs(f_m2)
    if abs(num) <= _FD_ULPS * eps * scale:
        return 0.0
    return float(num / (12.0 * h))


def central_diff_params(fn, params, h=1e-5):
    """Central finite differences of scalar fn(params) w.r.t. a dict of arrays."""
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for k in range(flat.size):
            orig = flat[k]

            def fn_at(d):
                flat[k] = orig + d
                return fn(params)

            gflat[k] = _stencil(fn_at, h)
            flat[k] = orig
        grads[name] = g
    return grads


def central_diff_array(fn, x, h=1e-5):
    """Central finite differences of scalar fn(x) w.r.t. one array."""
    x = np.asarray(x, dtype=np.float64).copy()
    g = np.zeros_like(x)
    flat, gflat = x.ravel(), g.ravel()
    for k in range(flat.size):
        orig = flat[k]

        def fn_at(d):
            flat[k] = orig + d
            return fn(x)

        gflat[k] = _stencil(fn_at, h)
        flat[k] = orig
    return g


def max_rel_error(a, b, guard=1e-8):
    """max |a - b| / max(guard, |a|, |b|), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(guard, np.maximum(np.abs(a), np.abs(b)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def tensor_rel_error(a, b, guard=1e-8):
    """Per-tensor relative error: ||a - b||_inf / max(guard, ||b||_inf, ||a||_inf)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = max(guard, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / denom


# -- independent loss oracles (plain numpy, dtype-preserving) -----------------


def oracle_xent(plist, x, y):
    """Mean cross-entropy from the straight-line logits, max-stabilized."""
    logits = straight_forward(plist, x)[-1]
    m = logits.max(axis=1, keepdims=True)
    lse = np.squeeze(m, 1) + np.log(np.exp(logits - m).sum(axis=1))
    return np.mean(lse - logits[np.arange(len(y)), y])


def oracle_hinge(plist, x, y, margin=1.0):
    """Mean multiclass hinge sum over rivals."""
    logits = straight_forward(plist, x)[-1]
    fy = logits[np.arange(len(y)), y][:, None]
    viol = np.maximum(0.0, margin + logits - fy)
    return np.mean(viol.sum(axis=1) - margin)


def frozen_margin_oracle(plist0, x, y, cfg):
    """Margin-loss surrogate with rival selection and denominators frozen at
    the base parameters; returns fn(plist) suitable for finite differencing.

    This is the function whose exact gradient the training path is defined to
    compute: denominators are constants w.r.t. the parameters.
    """
    from marginforge.margin import dual_exponent, lp_norm

    logits0 = straight_forward(plist0, x)[-1]
    b, n = logits0.shape
    order = np.argsort(-logits0, axis=1, kind="stable")
    rivals = order[order != y[:, None]].reshape(b, n - 1)[:, :cfg.top_k]
    q = dual_exponent(cfg.p)
    grads_by_class = {int(c): straight_class_grads(plist0, x, int(c))[1]
                      for c in np.unique(np.concatenate([rivals.ravel(), y]))}
    dens = {}
    for l in cfg.layers:
        den = np.empty((b, cfg.top_k))
        for bb in range(b):
            for t in range(cfg.top_k):
                diff = (grads_by_class[int(rivals[bb, t])][l][bb]
                        - grads_by_class[int(y[bb])][l][bb])
                den[bb, t] = lp_norm(diff, q)
        dens[l] = den
    clip = cfg.clip_value()
    rows = np.arange(b)

    def fn(plist):
        logits = straight_forward(plist, x)[-1]
        num = logits[rows[:, None], rivals] - logits[rows, y][:, None]
        total = np.zeros(b, dtype=logits.dtype)
        for l in cfg.layers:
            pen = np.maximum(0.0, cfg.gamma_for(l) + num / (cfg.epsilon + dens[l]))
            agg = pen.max(axis=1) if cfg.aggregator == "max" else pen.sum(axis=1)
            if clip is not None:
                agg = np.minimum(agg, clip)
            total = total + agg
        out = np.mean(total)
        if cfg.xent_weight > 0:
            out = out + cfg.xent_weight * oracle_xent(plist, x, y)
        return out

    return fn


# -- random differentiable test cases -----------------------------------------

KINK_BAND = 1e-3  # min distance of any hinge/ReLU/selection argument from its kink


def random_net_case(rng):
    """A random small dense/ReLU net (<= 4 dense layers, <= 16 units) and batch."""
    from marginforge.net import Dense, Relu, Model

    n_dense = int(rng.integers(1, 5))
    dims = [int(rng.integers(2, 9))]
    for _ in range(n_dense - 1):
        dims.append(int(rng.integers(2, 17)))
    n_classes = int(rng.integers(2, 6))
    dims.append(n_classes)
    layers = []
    for i in range(len(dims) - 1):
        if i > 0:
            layers.append(Relu())
        layers.append(Dense(dims[i], dims[i + 1]))
    params = {}
    for li, spec in enumerate(layers):
        if isinstance(spec, Dense):
            params[f"W{li}"] = rng.uniform(-0.9, 0.9, size=(spec.in_dim, spec.out_dim))
            params[f"b{li}"] = rng.uniform(-0.4, 0.4, size=spec.out_dim)
    model = Model(layers, params, n_classes, seed=0)
    batch = int(rng.integers(2, 5))
    x = rng.uniform(-1.0, 1.0, size=(batch, dims[0]))
    y = rng.integers(0, n_classes, size=batch)
    return model, x, y


def kink_distance(model, x, y, loss_kind, cfg=None, hinge_m=1.0):
    """Distance of the nearest hinge/ReLU/selection argument from its kink.

    The losses are piecewise differentiable; finite differences are only
    meaningful when no kink lies inside the stencil, so random cases closer
    than KINK_BAND to a kink are redrawn.
    """
    from marginforge.margin import dual_exponent, lp_norm

    plist = model_param_list(model)
    gaps = []
    h = np.asarray(x)
    L = len(plist)
    for t, (W, b) in enumerate(plist, start=1):
        z = h @ W + b
        if t < L:
            gaps.append(float(np.min(np.abs(z))))
            h = np.maximum(z, 0.0)
        else:
            h = z
    logits = h
    b_, n = logits.shape
    rows = np.arange(b_)
    if loss_kind == "hinge":
        t_ = hinge_m + logits - logits[rows, y][:, None]
        mask = np.ones_like(t_, dtype=bool)
        mask[rows, y] = False
        gaps.append(float(np.min(np.abs(t_[mask]))))
    if loss_kind == "margin":
        order = np.argsort(-logits, axis=1, kind="stable")
        rivals = order[order != y[:, None]].reshape(b_, n - 1)
        if cfg.top_k < n - 1:
            lv = logits[rows[:, None], rivals]
            gaps.append(float(np.min(np.abs(lv[:, cfg.top_k - 1] - lv[:, cfg.top_k]))))
        sel = rivals[:, :cfg.top_k]
        q = dual_exponent(cfg.p)
        grads_by_class = {int(c): straight_class_grads(plist, x, int(c))[1]
                          for c in np.unique(np.concatenate([sel.ravel(), y]))}
        clip = cfg.clip_value()
        num = logits[rows[:, None], sel] - logits[rows, y][:, None]
        for l in cfg.layers:
            den = np.empty((b_, cfg.top_k))
            for bb in range(b_):
                for t in range(cfg.top_k):
                    diff = (grads_by_class[int(sel[bb, t])][l][bb]
                            - grads_by_class[int(y[bb])][l][bb])
                    den[bb, t] = lp_norm(diff, q)
            tt = cfg.gamma_for(l) + num / (cfg.epsilon + den)
            gaps.append(float(np.min(np.abs(tt))))
            pen = np.maximum(0.0, tt)
            if cfg.aggregator == "max" and cfg.top_k > 1:
                s_ = np.sort(pen, axis=1)
                gaps.append(float(np.min(np.abs(s_[:, -1] - s_[:, -2]))))
            agg = pen.max(axis=1) if cfg.aggregator == "max" else pen.sum(axis=1)
            if clip is not None:
                gaps.append(float(np.min(np.abs(agg - clip))))
    return min(gaps) if gaps else np.inf


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
