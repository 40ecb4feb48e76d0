"""Central finite-difference checks for every differentiable operation.

The numeric side only evaluates forward values, so it stays independent of
the backward rules it checks.  Non-scalar outputs are reduced with a fixed
random projection before differencing.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from evifed import autodiff as ad
from evifed import evidential as ev
from evifed import model
from evifed.autodiff import Tensor

H = 1e-6


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray],
                 h: float = H) -> list[np.ndarray]:
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for j in range(a.size):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i].flat[j] += h
            minus[i].flat[j] -= h
            g.flat[j] = (f(plus) - f(minus)) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(fn: Callable[..., Tensor], arrays: list[np.ndarray], seed: int = 0,
          h: float = H) -> float:
    """Max relative error between backward() and central differences of ``fn``."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with ad.no_grad():
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    proj = np.random.default_rng(seed + 7919).normal(size=out_shape)

    def scalar(vals) -> float:
        with ad.no_grad():
            return float((fn(*[Tensor(v) for v in vals]).data * proj).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with ad.Graph() as g:
        out = fn(*leaves)
        loss = ad.sum_all(ad.mul(out, Tensor(proj)))
    ad.backward(loss, g)
    numeric = numeric_grad(scalar, arrays, h)
    errs = [relative_error(leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data), num)
            for leaf, num in zip(leaves, numeric)]
    return max(errs)


def _onehot(rng, n, j):
    return ev.one_hot(rng.integers(0, j, n), j)


def op_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]]:
    """name -> builder(rng) returning (function of Tensors, input arrays)."""

    def mk(fn, *shapes, low=None, high=None):
        def build(rng):
            if low is None:
                return fn, [rng.normal(size=s) for s in shapes]
            return fn, [rng.uniform(low, high, size=s) for s in shapes]
        return build

    def dropout_case(rng):
        mask_seed = int(rng.integers(1 << 30))
        return (lambda x: ad.dropout(x, 0.3, np.random.default_rng(mask_seed)),
                [rng.normal(size=(4, 5))])

    def mha_case(prefix):
        def build(rng):
            heads = int(rng.choice([1, 2, 4]))
            arrays = [rng.normal(size=(2, 3, 12))]
            if prefix:
                P = int(rng.integers(1, 4))
                arrays += [rng.normal(size=(P, 4)), rng.normal(size=(P, 4))]
                return (lambda q, k, v: ad.multihead_prefix_attention(q, k, v, heads)), arrays
            return (lambda q: ad.multihead_prefix_attention(q, None, None, heads), arrays)
        return build

    def prefix_case(rng):
        L, P, w = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 5))
        shapes = [(3, w), (L, w), (L, w), (P, w), (P, w)]
        return model.prefix_attention, [rng.normal(size=s) for s in shapes]

    def unc_case(rng):
        J = int(rng.integers(2, 9))
        y = _onehot(rng, 3, J)
        return (lambda a: ev.unc_loss(a, y)), [rng.uniform(1.0, 20.0, size=(3, J))]

    def kl_case(rng):
        J = int(rng.integers(2, 9))
        return ev.kl_regularizer, [rng.uniform(1.0, 20.0, size=(3, J))]

    def total_case(rng):
        J = int(rng.integers(2, 9))
        y = _onehot(rng, 4, J)
        lam = float(rng.uniform(0.0, 2.0))
        return (lambda a: ev.total_loss(a, y, ev.LossConfig(lam))), [rng.uniform(1.0, 20.0, (4, J))]

    def loglik_case(rng):
        J = int(rng.integers(2, 9))
        labels = rng.integers(0, J, 5)
        return (lambda z: ev.dirichlet_mean_loglik(ev.alpha_from_logits(z), labels)), \
            [rng.normal(size=(5, J))]

    def weightnet_case(rng):
        from evifed.dluc import WeightNet
        T = int(rng.integers(2, 6))
        u = rng.uniform(0.05, 0.95, T)
        net = WeightNet(T)

        def fn(w, b):
            net.weight, net.bias = w, b
            return net.weight_matrix(u)
        return fn, [rng.normal(size=(T, T)), rng.normal(size=T)]

    def index_case(rng):
        return (lambda x: ad.index(x, (slice(1, 3), 2))), [rng.normal(size=(4, 5))]

    def concat_case(rng):
        return (lambda a, b: ad.concat([a, b], 1)), [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))]

    cases = {
        "matmul": mk(ad.matmul, (3, 4), (4, 2)),
        "matmul_batched": mk(ad.matmul, (2, 3, 4), (2, 4, 5)),
        "add": mk(ad.add, (3, 4), (3, 4)),
        "sub": mk(ad.sub, (3, 4), (3, 4)),
        "mul": mk(ad.mul, (3, 4), (3, 4)),
        "scale": mk(lambda x: ad.scale(x, -1.7), (3, 4)),
        "add_bias": mk(ad.add_bias, (2, 3, 4), (4,)),
        "mul_scalar_tensor": mk(ad.mul_scalar_tensor, (3, 4), (1,)),
        "sum_all": mk(ad.sum_all, (3, 4)),
        "sum_axis": mk(lambda x: ad.sum_axis(x, 1), (3, 4, 2)),
        "mean_axis": mk(lambda x: ad.mean_axis(x, 0), (3, 4)),
        "reshape": mk(lambda x: ad.reshape(x, (6, 2)), (3, 4)),
        "transpose": mk(lambda x: ad.transpose(x, (2, 0, 1)), (2, 3, 4)),
        "concat": concat_case,
        "index": index_case,
        "exp": mk(ad.exp, (3, 4)),
        "exp_activation": mk(ad.exp_activation, (3, 4), low=-5.0, high=9.5),
        "log": mk(ad.log, (3, 4), low=0.2, high=5.0),
        "relu": mk(ad.relu, (3, 4)),
        "softmax_rows": mk(ad.softmax_rows, (3, 5)),
        "layer_norm": mk(ad.layer_norm, (3, 6)),
        "dropout": dropout_case,
        "digamma": mk(ad.digamma, (3, 4), low=0.3, high=30.0),
        "lgamma": mk(ad.lgamma, (3, 4), low=0.3, high=30.0),
        "multihead_attention": mha_case(False),
        "multihead_prefix_attention": mha_case(True),
        "prefix_attention": prefix_case,
        "unc_loss": unc_case,
        "kl_regularizer": kl_case,
        "total_loss": total_case,
        "dirichlet_mean_loglik": loglik_case,
        "weight_matrix": weightnet_case,
    }
    return cases


def run_case(name: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    fn, arrays = op_cases()[name](rng)
    return check(fn, arrays, seed)
