"""Central finite-difference checks for every backward pass.

Each layer primitive is checked on random float64 cases by contracting its
output with a random cotangent ``r`` (objective ``sum(out * r)``) and comparing
the analytic backward of ``r`` with central differences. The end-to-end check
differentiates the summed class-balanced loss of both heads w.r.t. sampled
network parameters.
"""
from dataclasses import dataclass

import numpy as np

from . import net, ops
from .loss import balanced_bce_grad, balanced_bce_loss

STEP = 1e-3
# End-to-end steps: a 1e-3 nudge to an early weight moves thousands of
# pre-activations and routinely crosses ReLU/max-pool kinks.
E2E_STEPS = (1e-5, 1e-6, 1e-7)
OP_TOL = 1e-4
E2E_TOL = 1e-3
N_CASES = 20
ERR_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    cases: int
    worst: str = ""

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def rel_error(analytic, numeric):
    """Elementwise |a - n| / max(|a|, |n|, floor), maximised."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), ERR_FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, x, h=STEP):
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def _away_from_zero(rng, shape, margin=0.05):
    mag = rng.uniform(margin, 1.0, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, gap=0.02):
    """Values whose pairwise gaps exceed 2*STEP, so max-pool argmax is stable."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape).astype(np.float64)


def _shape(rng, max_c=4, max_hw=6, min_hw=1):
    return (int(rng.integers(1, max_c + 1)), int(rng.integers(min_hw, max_hw + 1)),
            int(rng.integers(min_hw, max_hw + 1)))


def _flip(grad, corrupt):
    return -grad if corrupt else grad


def check_conv(rng, kernel, corrupt=False, cases=N_CASES):
    worst, where = 0.0, ""
    for case in range(cases):
        c, h, w = _shape(rng)
        o = int(rng.integers(1, 5))
        x = rng.standard_normal((c, h, w))
        wt = rng.standard_normal((o, c, kernel, kernel))
        b = rng.standard_normal(o)
        r = rng.standard_normal((o, h, w))

        def f():
            return float((ops.conv2d_forward(x, wt, b)[0] * r).sum())

        _, cache = ops.conv2d_forward(x, wt, b)
        gx, gw, gb = ops.conv2d_backward(r, cache)
        gx = _flip(gx, corrupt)
        for label, analytic, target in (("input", gx, x), ("weight", gw, wt), ("bias", gb, b)):
            err = rel_error(analytic, numeric_grad(f, target))
            if err >= worst:
                worst, where = err, f"case {case} {label} {(c, h, w)}->{o}"
    return CheckResult(f"conv2d_k{kernel}", worst, OP_TOL, cases, where)


def _check_unary(name, rng, make_input, forward, backward, corrupt=False,
                 cases=N_CASES):
    worst, where = 0.0, ""
    for case in range(cases):
        x = make_input(rng)
        out, cache = forward(x)
        r = rng.standard_normal(out.shape)

        def f():
            return float((forward(x)[0] * r).sum())

        analytic = _flip(backward(r, cache), corrupt)
        err = rel_error(analytic, numeric_grad(f, x))
        if err >= worst:
            worst, where = err, f"case {case} shape {x.shape}"
    return CheckResult(name, worst, OP_TOL, cases, where)


def check_relu(rng, corrupt=False, cases=N_CASES):
    return _check_unary("relu", rng, lambda g: _away_from_zero(g, _shape(g)),
                        ops.relu, ops.relu_backward, corrupt=corrupt, cases=cases)


def check_maxpool(rng, corrupt=False, cases=N_CASES):
    return _check_unary("maxpool2x2", rng, lambda g: _distinct(g, _shape(g)),
                        ops.maxpool2x2, ops.maxpool2x2_backward, corrupt=corrupt, cases=cases)


def check_resize(rng, corrupt=False, cases=N_CASES):
    targets = {}

    def make(g):
        c, h, w = _shape(g)
        x = g.standard_normal((c, h, w))
        targets[id(x)] = (h + int(g.integers(0, 7)), w + int(g.integers(0, 7)))
        return x

    def fwd(x):
        return ops.bilinear_resize(x, targets[id(x)])

    return _check_unary("bilinear_resize", rng, make, fwd, ops.bilinear_resize_backward,
                        corrupt=corrupt, cases=cases)


def check_concat(rng, corrupt=False, cases=N_CASES):
    worst, where = 0.0, ""
    for case in range(cases):
        _, h, w = _shape(rng)
        parts = [rng.standard_normal((int(rng.integers(1, 5)), h, w))
                 for _ in range(int(rng.integers(1, 5)))]
        out, offsets = ops.concat_channels(parts)
        r = rng.standard_normal(out.shape)

        def f():
            return float((ops.concat_channels(parts)[0] * r).sum())

        grads = ops.concat_backward(r, offsets)
        for j, (p, g) in enumerate(zip(parts, grads)):
            err = rel_error(_flip(g, corrupt), numeric_grad(f, p))
            if err >= worst:
                worst, where = err, f"case {case} part {j}"
    return CheckResult("concat_channels", worst, OP_TOL, cases, where)


def check_loss(rng, corrupt=False, cases=N_CASES):
    """Sigmoid + class-balanced cross entropy w.r.t. the activations."""
    worst, where = 0.0, ""
    for case in range(cases):
        _, h, w = _shape(rng)
        a = rng.normal(0.0, 3.0, size=(1, h, w))
        mask = (rng.random((1, h, w)) < rng.uniform(0.05, 0.95)).astype(np.uint8)

        def f():
            return balanced_bce_loss(None, mask, activation=a).total

        err = rel_error(_flip(balanced_bce_grad(a, mask), corrupt), numeric_grad(f, a))
        if err >= worst:
            worst, where = err, f"case {case} shape {a.shape}"
    return CheckResult("balanced_bce", worst, OP_TOL, cases, where)


def _activation_pattern(trace):
    """Digest of every ReLU on/off state and max-pool argmax in the trunk."""
    parts = []
    for pool_cache, layers in trace.stage_caches:
        if pool_cache is not None:
            parts.append(pool_cache["arg"].tobytes())
        parts.extend(np.packbits(mask).tobytes() for _, mask in layers)
    return hash(b"".join(parts))


def check_end_to_end(seed, width_scale=8, size=24, n_params=20, corrupt=False):
    rng = np.random.default_rng([seed, 0xE2E])
    params = net.build_network(net.NetConfig(width_scale=width_scale), seed).astype(np.float64)
    image = rng.standard_normal((3, size, size))
    masks = {t: (rng.random((1, size, size)) < 0.2).astype(np.uint8) for t in net.TASKS}

    def total_loss():
        _, trace = net.forward(params, image, net.TASKS)
        loss = sum(balanced_bce_loss(None, masks[t], activation=trace.activations[t]).total
                   for t in net.TASKS)
        return loss, _activation_pattern(trace)

    _, trace = net.forward(params, image, net.TASKS)
    head_grads = {t: balanced_bce_grad(trace.activations[t], masks[t]) for t in net.TASKS}
    grads = net.backward(params, trace, head_grads)

    names = sorted(params)
    worst, where = 0.0, ""
    for k in range(n_params):
        name = names[int(rng.integers(len(names)))]
        flat = params[name].reshape(-1)
        idx = int(rng.integers(flat.size))
        old = flat[idx]
        for h in E2E_STEPS:
            flat[idx] = old + h
            up, pattern_up = total_loss()
            flat[idx] = old - h
            down, pattern_down = total_loss()
            flat[idx] = old
            if pattern_up == pattern_down:
                break
        numeric = (up - down) / (2 * h)
        analytic = grads[name].reshape(-1)[idx]
        if corrupt and k == 0:
            analytic = -analytic
        err = rel_error(analytic, numeric)
        if err >= worst:
            worst, where = err, f"{name}[{idx}]"
    return CheckResult("end_to_end", worst, E2E_TOL, n_params, where)


OP_CHECKS = {
    "conv2d_k3": lambda rng, corrupt: check_conv(rng, 3, corrupt),
    "conv2d_k1": lambda rng, corrupt: check_conv(rng, 1, corrupt),
    "relu": check_relu,
    "maxpool2x2": check_maxpool,
    "bilinear_resize": check_resize,
    "concat_channels": check_concat,
    "balanced_bce": check_loss,
}
CHECK_NAMES = tuple(OP_CHECKS) + ("end_to_end",)


def run_suite(seed=0, width_scale=8, corrupt=None):
    """Run every check; ``corrupt`` names one check whose analytic gradient is negated."""
    if corrupt is not None and corrupt not in CHECK_NAMES:
        raise ValueError(f"unknown check {corrupt!r}")
    results = []
    for name, fn in OP_CHECKS.items():
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        results.append(fn(rng, corrupt == name))
    results.append(check_end_to_end(seed, width_scale, corrupt=corrupt == "end_to_end"))
    return results
