"""Finite-difference gradient checks for every primitive and the whole model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .model import ModelConfig, init_params, model_forward, model_forward_reference, tiny_config
from .tensor import (
    RunningStats,
    Tensor,
    avg_pool,
    batch_norm,
    contract_expand,
    conv2d,
    cross_entropy,
    factored_conv,
    gelu_op,
    gradcheck,
    hadamard,
    linear,
    reshape,
    softmax_axis,
    tanh_op,
    tensor_sum,
)

GRADCHECK_TOL = 1e-4


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _probe(op: Callable, out_shape, rng) -> Callable:
    """Scalarize ``op`` as sum(r * op(...)) with fixed random r, so no output
    direction has an identically-zero derivative."""
    r = Tensor(rng.standard_normal(out_shape))
    return lambda ps: tensor_sum(hadamard(op(*ps), r))


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable, list[Tensor]]]:
    rng = np.random.default_rng(seed)
    cases = {}

    def add(name, op, inputs):
        out = op(*inputs)
        cases[name] = (_probe(op, out.shape, rng), inputs)

    add("contract_expand", contract_expand, [_leaf(rng, 2, 1, 3, 4), _leaf(rng, 3, 1, 3)])
    add("contract_expand_depth2", contract_expand, [_leaf(rng, 2, 2, 3, 4), _leaf(rng, 3, 2, 3)])
    add("conv2d_valid", lambda x, w, b: conv2d(x, w, b),
        [_leaf(rng, 2, 2, 4, 6), _leaf(rng, 3, 2, 2, 3), _leaf(rng, 3)])
    add("conv2d_same", lambda x, w, b: conv2d(x, w, b, padding="same"),
        [_leaf(rng, 2, 1, 5, 4), _leaf(rng, 2, 1, 4, 1), _leaf(rng, 2)])
    add("factored_conv", factored_conv,
        [_leaf(rng, 2, 3, 6), _leaf(rng, 2, 2, 3), _leaf(rng, 3, 2, 1, 3), _leaf(rng, 3)])
    add("tanh", tanh_op, [_leaf(rng, 2, 3, 4)])
    add("gelu", gelu_op, [_leaf(rng, 2, 3, 4, scale=2.0)])
    add("softmax", lambda x: softmax_axis(x, 1), [_leaf(rng, 2, 5, 3)])
    add("batch_norm_train",
        lambda x, g, b: batch_norm(x, g, b, RunningStats.fresh(3), training=True),
        [_leaf(rng, 3, 3, 2, 4), _leaf(rng, 3), _leaf(rng, 3)])
    stats = RunningStats(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))
    add("batch_norm_eval", lambda x, g, b: batch_norm(x, g, b, stats, training=False),
        [_leaf(rng, 2, 3, 2, 4), _leaf(rng, 3), _leaf(rng, 3)])
    add("avg_pool", lambda x: avg_pool(x, (2, 2)), [_leaf(rng, 2, 2, 5, 6)])
    add("linear", linear, [_leaf(rng, 3, 4), _leaf(rng, 2, 4), _leaf(rng, 2)])
    add("hadamard", hadamard, [_leaf(rng, 2, 3, 1), _leaf(rng, 2, 3, 4)])
    add("reshape", lambda x: reshape(x, (6, 4)), [_leaf(rng, 2, 3, 4)])
    labels = rng.integers(0, 3, 4)
    cases["cross_entropy"] = (lambda ps: cross_entropy(ps[0], labels), [_leaf(rng, 4, 3)])
    return cases


def model_case(config: ModelConfig | None = None, batch: int = 4, reference: bool = False,
               seed: int = 0):
    cfg = config or tiny_config()
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((batch, 1, cfg.C, cfg.T)))
    y = rng.integers(0, cfg.n_classes, batch)
    names = [k for k in params.arrays]
    forward = model_forward_reference if reference else model_forward

    def f(ps):
        params.arrays.update(zip(names, ps))
        return cross_entropy(forward(x, params, training=cfg.use_batchnorm), y)

    return f, [params.arrays[k] for k in names]


def run_gradchecks(seed: int = 0) -> dict[str, float]:
    """Max relative error per primitive plus the tiny end-to-end model (both paths)."""
    results = {name: gradcheck(f, ps) for name, (f, ps) in primitive_cases(seed).items()}
    results["model_tiny"] = gradcheck(*model_case(seed=seed))
    results["model_tiny_unfused"] = gradcheck(*model_case(seed=seed, reference=True))
    return results
