"""Central finite-difference checks of every analytic gradient, in float64."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import siamese
from .tensor import ops
from .tensor.network import TOY_PROFILE, Network


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max |a - n| relative to the tensor's gradient scale max(|a|, |n|, floor).

    Scaling by the whole tensor rather than per element keeps round-off in
    near-zero entries (e.g. a conv bias feeding batchnorm, whose true gradient
    is 0) from dominating; ``floor`` is the absolute tolerance for such tensors.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
    return float(np.max(np.abs(a - n))) / scale


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def check_conv(seed: int, stride: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 8, 9, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    y, _ = ops.conv2d_forward(x, w, b, stride)
    r = rng.standard_normal(y.shape)

    def f():
        return float(np.sum(ops.conv2d_forward(x, w, b, stride)[0] * r))

    _, cache = ops.conv2d_forward(x, w, b, stride)
    dx, dw, db = ops.conv2d_backward(r, cache)
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, w)),
               rel_error(db, numeric_grad(f, b)))


def check_batchnorm(seed: int, train: bool):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 5, 3)) * 2 + 0.5
    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    r = rng.standard_normal(x.shape)

    def f():
        # copies keep the running buffers fixed across evaluations
        return float(np.sum(ops.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), train)[0] * r))

    _, cache = ops.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), train)
    dx, dg, db = ops.batchnorm_backward(r, cache)
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dg, numeric_grad(f, gamma)),
               rel_error(db, numeric_grad(f, beta)))


def check_relu(seed: int):
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng, (2, 5, 5, 3))
    r = rng.standard_normal(x.shape)

    def f():
        return float(np.sum(ops.relu_forward(x)[0] * r))

    _, mask = ops.relu_forward(x)
    return rel_error(ops.relu_backward(r, mask), numeric_grad(f, x))


def check_correlation(seed: int):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((2, 3, 4, 3))
    s = rng.standard_normal((2, 7, 6, 3))
    r = rng.standard_normal((2, 5, 3))

    def f():
        return float(np.sum(siamese.cross_correlate_direct(t, s) * r))

    dt, ds = siamese.cross_correlate_backward(r, t, s)
    return max(rel_error(dt, numeric_grad(f, t)), rel_error(ds, numeric_grad(f, s)))


def check_l2(seed: int):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((9, 9))
    target = siamese.gaussian_map((9, 9), rng.uniform(2, 6, 2), 2.0).values

    def f():
        return siamese.l2_loss(scores, target)[0]

    return rel_error(siamese.l2_loss(scores, target)[1], numeric_grad(f, scores))


def check_logistic(seed: int, weighting: str):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((9, 9)) * 2
    target = siamese.binary_target((9, 9), rng.uniform(3, 5, 2), 2.0)

    def f():
        return siamese.logistic_loss_baseline(scores, target, weighting)[0]

    return rel_error(siamese.logistic_loss_baseline(scores, target, weighting)[1], numeric_grad(f, scores))


def check_end_to_end(seed: int):
    """L2 training loss of the toy siamese network w.r.t. every parameter, batchnorm in train mode."""
    rng = np.random.default_rng(seed)
    net = Network(TOY_PROFILE, seed=seed, dtype=np.float64)
    for p in net.params:
        if "beta" in p:
            p["gamma"][:] = rng.uniform(0.5, 1.5, p["gamma"].shape)
            p["beta"][:] = rng.standard_normal(p["beta"].shape) * 0.1
    templates = rng.standard_normal((2, 9, 9, 1))
    searches = rng.standard_normal((2, 15, 15, 1))
    m = net.output_size(15) - net.output_size(9) + 1
    target = np.stack([siamese.gaussian_map((m, m), rng.uniform(1, m - 2, 2), 1.0).values for _ in range(2)])
    buffers = [{k: v.copy() for k, v in b.items()} for b in net.buffers]

    def loss():
        for b, saved in zip(net.buffers, buffers):
            for k in b:
                b[k][:] = saved[k]
        et, tt = net.forward(templates, train=True)
        es, ts = net.forward(searches, train=True)
        scores = siamese.cross_correlate_direct(et, es)
        value, dscores = siamese.l2_loss(scores, target)
        return value, (et, es, tt, ts, dscores)

    _, (et, es, tt, ts, dscores) = loss()
    dt, ds = siamese.cross_correlate_backward(dscores, et, es)
    _, gt = net.backward(dt, tt)
    _, gs = net.backward(ds, ts)
    worst = 0.0
    for i, p in enumerate(net.params):
        for name, value in p.items():
            analytic = gt[i][name] + gs[i][name]
            worst = max(worst, rel_error(analytic, numeric_grad(lambda: loss()[0], value)))
    return worst


CHECKS = {
    "conv2d stride 1": lambda s: check_conv(s, 1),
    "conv2d stride 2": lambda s: check_conv(s, 2),
    "batchnorm train": lambda s: check_batchnorm(s, True),
    "batchnorm eval": lambda s: check_batchnorm(s, False),
    "relu": check_relu,
    "cross-correlation": check_correlation,
    "l2 loss": check_l2,
    "logistic loss": lambda s: check_logistic(s, "none"),
    "logistic loss balanced": lambda s: check_logistic(s, "class-balanced"),
    "end-to-end l2": check_end_to_end,
}


def run_suite(seeds=range(5), tol: float = 1e-4, names=None) -> list[CheckResult]:
    out = []
    for name, check in CHECKS.items():
        if names is not None and name not in names:
            continue
        for seed in seeds:
            out.append(CheckResult(name, int(seed), check(int(seed)), tol))
    return out
