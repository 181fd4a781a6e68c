"""Reverse-mode vs central-difference gradient checks, run in float64."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .hisn import HisnConfig, build_network
from .lamn import modulate
from .tensor import Tensor, finite_diff_grad, relative_error

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    seconds: float
    tol: float = TOLERANCE

    @property
    def passed(self):
        return self.rel_error < self.tol


def check_function(name, build, inputs, eps=1e-6, tol=TOLERANCE, coords=None, rng=None):
    """Compare backward() with finite differences for every input array.

    ``build`` maps a list of Tensors to a scalar Tensor. With ``coords`` set,
    only that many randomly chosen coordinates per input are differenced.
    """
    t0 = time.perf_counter()
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = build(leaves)
    out.backward()
    worst = 0.0
    for k, x in enumerate(inputs):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(x)

        def f(v, k=k):
            args = [Tensor(a) for a in inputs]
            args[k] = Tensor(v)
            return build(args).item()

        if coords is None or coords >= x.size:
            numeric = finite_diff_grad(f, x, eps)
            worst = max(worst, relative_error(analytic, numeric))
        else:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(x.size, size=coords, replace=False)
            num, ana = [], []
            flat = x.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(x.copy())
                flat[i] = orig - eps
                fm = f(x.copy())
                flat[i] = orig
                num.append((fp - fm) / (2 * eps))
                ana.append(analytic.reshape(-1)[i])
            worst = max(worst, relative_error(ana, num))
    return CheckResult(name, worst, time.perf_counter() - t0, tol)


def _rand(rng, *shape, scale=0.1):
    return rng.standard_normal(shape) * scale


def primitive_checks(seed=0):
    """Each tensor-core primitive, modulate and log_map on small random inputs."""
    rng = np.random.default_rng(seed)
    w = _rand(rng, 1, 2, 5, 5, scale=1.0)
    results = []
    # fixed projection so every check reduces to a scalar with non-trivial upstream gradient
    for notation in ("k3s1p1d1", "k3s1p2d2", "k3s2p1d1", "k4s1p0d1"):
        spec = T.LayerSpec.parse(notation)
        x = _rand(rng, 2, 2, 8, 8)
        wt = _rand(rng, 3, 2, spec.k, spec.k)
        b = _rand(rng, 3)
        ho = T.conv_output_size(8, spec.k, spec.s, spec.p, spec.d)
        proj = _rand(rng, 2, 3, ho, ho, scale=1.0)
        results.append(check_function(
            f"conv2d {notation}",
            lambda a, spec=spec, proj=proj: T.total(T.mul(T.conv2d(a[0], a[1], a[2], spec.s, spec.p, spec.d),
                                                           Tensor(proj))),
            [x, wt, b]))

    proj = _rand(rng, 2, 3, 6, 6, scale=1.0)
    P = lambda t: T.total(T.mul(t, Tensor(proj)))  # noqa: E731
    results.append(check_function("relu", lambda a: P(T.relu(a[0])), [_rand(rng, 2, 3, 6, 6)]))
    results.append(check_function("sigmoid", lambda a: P(T.sigmoid(a[0])), [_rand(rng, 2, 3, 6, 6)]))
    results.append(check_function(
        "avgpool", lambda a: T.total(T.mul(T.avg_pool2d(a[0], 2), Tensor(proj[:, :, :3, :3]))),
        [_rand(rng, 2, 3, 6, 6)]))
    results.append(check_function(
        "concat", lambda a: P(T.concat([a[0], a[1]])), [_rand(rng, 2, 1, 6, 6), _rand(rng, 2, 2, 6, 6)]))
    results.append(check_function("add", lambda a: P(T.add(a[0], a[1])),
                                  [_rand(rng, 2, 3, 6, 6), _rand(rng, 2, 1, 6, 6)]))
    results.append(check_function("mul", lambda a: P(T.mul(a[0], a[1])),
                                  [_rand(rng, 2, 3, 6, 6), _rand(rng, 2, 1, 6, 6)]))
    results.append(check_function(
        "tile_spatial", lambda a: P(T.tile_spatial(a[0], 6, 6)), [_rand(rng, 2, 3, 1, 1)]))
    results.append(check_function("minimum", lambda a: P(T.minimum(a[0], 0.05)), [_rand(rng, 2, 3, 6, 6)]))
    results.append(check_function("rms", lambda a: T.rms(a[0]), [_rand(rng, 2, 3, 6, 6)]))
    results.append(check_function("mean", lambda a: T.mean(T.mul(a[0], a[0])), [_rand(rng, 2, 3, 6, 6)]))
    results.append(check_function(
        "modulate", lambda a: P(modulate(a[0], a[1], a[2])),
        [_rand(rng, 2, 3, 6, 6), np.abs(_rand(rng, 2, 3, 6, 6)), np.abs(_rand(rng, 2, 3, 6, 6))]))
    results.append(check_function(
        "log_map", lambda a: P(T.log_map(a[0], 5000.0)), [np.abs(_rand(rng, 2, 3, 6, 6)) + 0.01]))
    del w
    return results


def toy_problem(size=32, width=16, seed=0, variant="default"):
    """Random float64 toy network, LDR batch with some saturation, and a loss closure."""
    from .lamn import compute_mask
    from .training import Batch, loss

    cfg = HisnConfig(width=width, input_size=size, variant=variant, seed=seed)
    params = build_network(cfg).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    # zero biases put ReLU inputs exactly on the kink wherever the mask is 0;
    # jitter them so the check runs at a differentiable point
    for name, t in params.tensors.items():
        if name.endswith(".b"):
            t.data += rng.normal(0.0, 0.05, t.data.shape)
    hdr = np.exp(rng.normal(-1.0, 0.8, size=(1, 3, size, size)))
    hdr[:, :, size // 4:size // 2, size // 4:size // 2] *= 6.0
    dim = np.minimum(hdr, 1.0)
    bright = hdr - dim
    ldr = np.floor(dim ** (1 / 2.2) * 255 + 0.5) / 255
    batch = Batch(ldr=ldr, dim=dim, bright=bright, crf_target=dim ** (1 / 2.2), mask=compute_mask(ldr))

    def objective(pdict):
        from .hisn import NetworkParams, hisn_forward

        net = NetworkParams(cfg, pdict)
        pred = hisn_forward(Tensor(batch.ldr), Tensor(batch.mask), net)
        return loss(pred, batch, 1.0, 5000.0).total

    return params, objective


def network_check(size=32, width=16, seed=0, coords=2, eps=1e-6, variant="default"):
    """Loss gradient of the toy HiSN+LAMN network w.r.t. every parameter tensor.

    ``coords`` coordinates are sampled per tensor (every tensor is visited).
    """
    t0 = time.perf_counter()
    params, objective = toy_problem(size, width, seed, variant)
    out = objective(params.tensors)
    out.backward()
    rng = np.random.default_rng(seed + 2)
    base = {k: v.data for k, v in params.tensors.items()}
    ana, num, per_tensor = [], [], {}
    for name, arr in base.items():
        grad = params.tensors[name].grad
        grad = np.zeros_like(arr) if grad is None else grad
        idx = rng.choice(arr.size, size=min(coords, arr.size), replace=False)
        for i in idx:
            vals = []
            for sign in (1.0, -1.0):
                pert = arr.copy()
                pert.reshape(-1)[i] += sign * eps
                tensors = {k: Tensor(v) for k, v in base.items()}
                tensors[name] = Tensor(pert)
                vals.append(objective(tensors).item())
            g_num = (vals[0] - vals[1]) / (2 * eps)
            num.append(g_num)
            ana.append(grad.reshape(-1)[i])
        per_tensor[name] = relative_error(ana[-len(idx):], num[-len(idx):], floor=1e-3)
    err = relative_error(ana, num)
    res = CheckResult(f"toy HiSN+LAMN loss ({variant}, C={width}, {size}x{size})", err,
                      time.perf_counter() - t0)
    res.per_tensor = per_tensor
    return res


def run_all(size=32, width=16, seed=0, coords=2):
    results = primitive_checks(seed)
    results.append(network_check(size, width, seed, coords))
    return results


def format_table(results):
    lines = [f"{'check':<48} {'rel.err':>10} {'tol':>8} {'time[s]':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<48} {r.rel_error:>10.2e} {r.tol:>8.0e} {r.seconds:>8.2f}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
