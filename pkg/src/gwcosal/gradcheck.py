"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    op_closure: Callable,
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients with central differences.

    ``op_closure(*inputs)`` must return ``(value, grads)`` where ``value`` is a
    scalar and ``grads[i]`` has the shape of ``inputs[i]``. Every coordinate of
    every input is perturbed unless ``max_coords`` is given, in which case that
    many coordinates per input are drawn with ``numpy.random.default_rng(seed)``.

    Returns the maximum relative error over all checked coordinates.
    """
    inputs = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    _, grads = op_closure(*inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x, g in zip(inputs, grads):
        g = np.asarray(g)
        if g.shape != x.shape:
            raise ValueError(f"gradient shape {g.shape} does not match input shape {x.shape}")
        flat = x.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(op_closure(*inputs)[0])
            flat[i] = orig - eps
            fm = float(op_closure(*inputs)[0])
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            worst = max(worst, float(relative_error(g.reshape(-1)[i], numeric)))
    return worst


# ------------------------------------------------------------------ suite
# Randomised checks for every layer primitive and for the whole network on a
# micro configuration. Each returns the max relative error for one seed.


def _projection(rng, shape):
    return rng.standard_normal(shape)


def check_conv2d(seed: int, eps: float = 1e-5) -> float:
    from .ops import ConvParams, conv2d, conv2d_grad

    rng = np.random.default_rng(seed)
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    u = _projection(rng, conv2d(x, ConvParams(wt, b, stride, pad))[0].shape)

    def f(x, wt, b):
        y, ctx = conv2d(x, ConvParams(wt, b, stride, pad))
        return float(np.sum(y * u)), list(conv2d_grad(ctx, u))

    return grad_check(f, [x, wt, b], eps)


def check_deconv2d(seed: int, eps: float = 1e-5) -> float:
    from .ops import ConvParams, deconv2d, deconv2d_grad

    rng = np.random.default_rng(seed)
    n, a, bch = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    stride = int(rng.integers(1, 4))
    k = stride + int(rng.integers(0, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x = rng.standard_normal((n, a, h, w))
    wt = rng.standard_normal((a, bch, k, k))
    b = rng.standard_normal(bch)
    u = _projection(rng, deconv2d(x, ConvParams(wt, b, stride, pad))[0].shape)

    def f(x, wt, b):
        y, ctx = deconv2d(x, ConvParams(wt, b, stride, pad))
        return float(np.sum(y * u)), list(deconv2d_grad(ctx, u))

    return grad_check(f, [x, wt, b], eps)


def check_relu(seed: int, eps: float = 1e-5) -> float:
    from .ops import relu, relu_grad

    rng = np.random.default_rng(seed)
    shape = (2, 3, 4, 5)
    # keep inputs away from the kink at 0
    x = rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 2.0, size=shape)
    u = _projection(rng, shape)

    def f(x):
        y, mask = relu(x)
        return float(np.sum(y * u)), [relu_grad(mask, u)]

    return grad_check(f, [x], eps)


def check_maxpool2(seed: int, eps: float = 1e-5) -> float:
    from .ops import maxpool2, maxpool2_grad

    rng = np.random.default_rng(seed)
    shape = (2, 2, 4, 6)
    size = int(np.prod(shape))
    # distinct values spaced well apart so every window has a unique maximum
    x = (rng.permutation(size) / size * 4.0 - 2.0).reshape(shape)
    u = _projection(rng, (2, 2, 2, 3))

    def f(x):
        y, ctx = maxpool2(x)
        return float(np.sum(y * u)), [maxpool2_grad(ctx, u)]

    return grad_check(f, [x], eps)


def check_concat(seed: int, eps: float = 1e-5) -> float:
    from .ops import concat_channels, split_channels

    rng = np.random.default_rng(seed)
    sizes = [int(s) for s in rng.integers(1, 4, size=3)]
    xs = [rng.standard_normal((2, s, 3, 3)) for s in sizes]
    u = _projection(rng, (2, sum(sizes), 3, 3))

    def f(*xs):
        y = concat_channels(list(xs))
        return float(np.sum(y * u)), split_channels(u, sizes)

    return grad_check(f, xs, eps)


def micro_config(k: int = 3, single_image: bool = False):
    from .net import NetConfig

    return NetConfig(
        k=k,
        input_size=(16, 16),
        semantic_widths=(2, 2, 3, 3, 4, 4, 4, 4, 4, 4, 4, 4, 4),
        group_branch_width=4,
        single_branch_width=4,
        single_image=single_image,
    )


def check_network(seed: int, eps: float = 1e-5, single_image: bool = False, max_coords: int = 6) -> float:
    """End-to-end check of the summed group loss on the micro configuration."""
    from .net import ParamStore, backward_group, forward_group, init_params
    from .train import group_loss

    cfg = micro_config(single_image=single_image)
    rng = np.random.default_rng(seed)
    store = init_params(cfg, seed, dtype=np.float64)
    names = store.names()
    # non-zero biases and a perturbed head so no gradient is trivially zero
    base = [store[n] + 0.1 * rng.standard_normal(store[n].shape) for n in names]
    images = rng.standard_normal((cfg.k, 3) + cfg.input_size)
    gt = (rng.random((cfg.k, 1) + cfg.input_size) > 0.5).astype(np.float64)

    def f(*arrays):
        params = ParamStore(dict(zip(names, arrays)), {})
        acts = forward_group(images, params, cfg)
        loss, d_r = group_loss(acts.r, gt, "sum")
        grads = backward_group(acts, d_r, params, cfg)
        return loss, [grads[n] for n in names]

    return grad_check(f, base, eps, max_coords=max_coords, seed=seed)


GRADIENT_CHECKS = {
    "conv2d": check_conv2d,
    "deconv2d": check_deconv2d,
    "relu": check_relu,
    "maxpool2": check_maxpool2,
    "concat/split": check_concat,
    "network": check_network,
    "network (single-image)": lambda seed, eps=1e-5: check_network(seed, eps, single_image=True),
}


def run_gradient_suite(seeds: int = 20, eps: float = 1e-5) -> dict:
    """Worst relative error per check over ``seeds`` random instances."""
    return {name: max(fn(s, eps) for s in range(seeds)) for name, fn in GRADIENT_CHECKS.items()}
