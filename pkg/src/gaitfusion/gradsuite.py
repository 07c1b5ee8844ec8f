"""Finite-difference gradient checks for every differentiable op, every
network block, the C2 module and a tiny end-to-end model loss.

All checks run in float64 on random inputs drawn away from kinks (ReLU
zero, min/max ties), reduce the output to a scalar through fixed random
weights, and compare against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .fusion import C2Module, CrossAttentionFusion
from .losses import softmax_ce, triplet_loss
from .model import GaitHead, ModelConfig, build, horizontal_pool, temporal_pool
from .nn import (BatchNorm, BNNeck, Conv2d, ConvBNReLU, ResidualBlock, SeparateFC, SqueezeExcitation,
                 Stage)
from .tensor import GradCheckReport, Tensor, grad_check

BLOCK_TOL = 1e-4
END_TO_END_TOL = 1e-3
F64 = np.float64


@dataclass
class Check:
    name: str
    build: Callable  # rng -> (fn, inputs, max_entries)
    tolerance: float = BLOCK_TOL


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64), dtype=F64)


def _normal(rng, *shape) -> Tensor:
    return _t(rng.standard_normal(shape))


def _away(rng, *shape, gap=0.1) -> Tensor:
    """Values with magnitude >= ``gap``, so ReLU never sits at its kink."""
    x = rng.standard_normal(shape)
    return _t(np.sign(x) * (np.abs(x) + gap))


def _distinct(rng, *shape) -> Tensor:
    """Entries pairwise at least 0.01 apart (tie-free for max/min/argsort)."""
    n = int(np.prod(shape))
    return _t(rng.permutation(n).reshape(shape) * 0.05 - n * 0.025 + rng.uniform(0, 0.01, shape))


def _weighted(out, w):
    return T.sum_(out * w)


def _scalar(fn, rng, shape_of):
    """Wrap ``fn`` so its output is reduced against fixed random weights."""
    cache = {}

    def wrapped(*xs):
        out = fn(*xs)
        outs = out if isinstance(out, tuple) else (out,)
        total = None
        for i, o in enumerate(outs):
            if i not in cache:
                cache[i] = _t(rng.standard_normal(o.shape))
            term = _weighted(o, cache[i])
            total = term if total is None else total + term
        return total

    return wrapped


def _op(fn, *makers, max_entries=None):
    def builder(rng):
        inputs = [m(rng) for m in makers]
        return _scalar(fn, rng, None), inputs, max_entries
    return builder


def _module(make_module, make_inputs, call=None, max_entries=12):
    """Check gradients w.r.t. the module inputs and every parameter."""
    def builder(rng):
        mod = make_module(np.random.default_rng(int(rng.integers(1 << 31)))).to(F64)
        for p in mod.parameters():
            p.data = p.data + 0.05 * rng.standard_normal(p.shape)  # break symmetric inits (BN ones/zeros)
        xs = make_inputs(rng)
        params = mod.parameters()
        n = len(xs)
        run = call or (lambda m, *a: m(*a))
        return _scalar(lambda *all_: run(mod, *all_[:n]), rng, None), xs + params, max_entries
    return builder


def op_checks() -> list[Check]:
    pos = lambda *s: (lambda r: _t(r.uniform(0.5, 2.0, s)))  # noqa: E731
    nrm = lambda *s: (lambda r: _normal(r, *s))  # noqa: E731
    dst = lambda *s: (lambda r: _distinct(r, *s))  # noqa: E731
    awy = lambda *s: (lambda r: _away(r, *s))  # noqa: E731
    return [
        Check("add (broadcast)", _op(T.add, nrm(3, 4), nrm(4))),
        Check("sub (broadcast)", _op(T.sub, nrm(3, 1), nrm(3, 4))),
        Check("mul (broadcast)", _op(T.mul, nrm(2, 3, 4), nrm(1, 3, 1))),
        Check("div", _op(T.div, nrm(3, 4), pos(3, 4))),
        Check("minimum", _op(lambda a, b: T.minimum(a, b), lambda r: _distinct(r, 3, 4),
                             lambda r: _t(_distinct(r, 3, 4).data + 0.013))),
        Check("maximum", _op(lambda a, b: T.maximum(a, b), lambda r: _distinct(r, 3, 4),
                             lambda r: _t(_distinct(r, 3, 4).data + 0.013))),
        Check("neg", _op(T.neg, nrm(5))),
        Check("exp", _op(T.exp, nrm(3, 4))),
        Check("log", _op(T.log, pos(3, 4))),
        Check("sqrt", _op(T.sqrt, pos(3, 4))),
        Check("relu", _op(T.relu, awy(3, 4))),
        Check("sigmoid", _op(T.sigmoid, nrm(3, 4))),
        Check("reshape", _op(lambda x: T.reshape(x, (4, 6)), nrm(2, 3, 4))),
        Check("transpose", _op(lambda x: T.transpose(x, (2, 0, 1)), nrm(2, 3, 4))),
        Check("getitem (slice)", _op(lambda x: x[1:, ::2], nrm(3, 5))),
        Check("getitem (gather, repeated)", _op(lambda x: x[np.array([0, 2, 2]), np.array([1, 0, 0])], nrm(3, 4))),
        Check("concat", _op(lambda a, b: T.concat([a, b], axis=1), nrm(2, 3), nrm(2, 2))),
        Check("stack", _op(lambda a, b: T.stack([a, b], axis=0), nrm(2, 3), nrm(2, 3))),
        Check("sum over axes", _op(lambda x: T.sum_(x, (0, 2), keepdims=True), nrm(2, 3, 4))),
        Check("mean", _op(lambda x: T.mean(x, 1), nrm(2, 3, 4))),
        Check("max reduce", _op(lambda x: T.reduce("max", x, (1, 2)), dst(2, 3, 4))),
        Check("min reduce", _op(lambda x: T.reduce("min", x, 0), dst(3, 4))),
        Check("matmul (batched)", _op(T.matmul, nrm(2, 3, 4), nrm(4, 5))),
        Check("conv2d stride 1 pad 1", _op(lambda x, w: T.conv2d(x, w, 1, 1), nrm(2, 3, 6, 5), nrm(4, 3, 3, 3))),
        Check("conv2d stride 2 with bias", _op(lambda x, w, b: T.conv2d(x, w, 2, 1, bias=b),
                                               nrm(2, 2, 7, 6), nrm(3, 2, 3, 3), nrm(3))),
        Check("conv2d 1x1", _op(lambda x, w: T.conv2d(x, w, 1, 0), nrm(2, 3, 4, 4), nrm(2, 3, 1, 1))),
        Check("pairwise_softmax", _op(T.pairwise_softmax, nrm(2, 3, 4), nrm(2, 3, 4))),
        Check("minmax_normalize_spatial", _op(T.minmax_normalize_spatial, dst(2, 3, 4, 5))),
        Check("log_softmax", _op(lambda x: T.log_softmax(x, -1), nrm(3, 5))),
        Check("batch_norm (train)", _op(lambda x, g, b: T.batch_norm(x, g, b, (0, 2, 3))[0],
                                        nrm(4, 3, 2, 2), nrm(3), nrm(3))),
        Check("batch_norm (eval)", _op(
            lambda x, g, b: T.batch_norm(x, g, b, (0,), running_mean=np.full(3, 0.2),
                                         running_var=np.full(3, 1.5), training=False)[0],
            nrm(4, 3), nrm(3), nrm(3))),
    ]


def _head_config() -> ModelConfig:
    return ModelConfig(variant="s", stem=2, widths=(2, 2, 3, 4), parts=2, embed_dim=3, num_classes=3,
                       input_hw=(8, 6))


def block_checks() -> list[Check]:
    def feats(*s):
        return lambda r: [_normal(r, *s)]

    def pair(*s):
        return lambda r: [_normal(r, *s), _normal(r, *s)]

    return [
        Check("Conv2d", _module(lambda g: Conv2d(2, 3, 3, 1, rng=g), feats(2, 2, 5, 4))),
        Check("BatchNorm", _module(lambda g: BatchNorm(3), feats(4, 3, 2, 3))),
        Check("ConvBNReLU", _module(lambda g: ConvBNReLU(2, 3, rng=g), feats(3, 2, 4, 4))),
        Check("SqueezeExcitation", _module(lambda g: SqueezeExcitation(4, 2, rng=g), feats(2, 4, 3, 3))),
        Check("ResidualBlock (identity)", _module(lambda g: ResidualBlock(3, 3, 1, rng=g), feats(2, 3, 4, 4))),
        Check("ResidualBlock (projection)", _module(lambda g: ResidualBlock(2, 3, 2, rng=g), feats(2, 2, 5, 4))),
        Check("Stage", _module(lambda g: Stage(2, 3, 2, blocks=2, rng=g), feats(2, 2, 4, 4))),
        Check("SeparateFC", _module(lambda g: SeparateFC(3, 4, 2, rng=g), feats(2, 3, 4))),
        Check("BNNeck", _module(lambda g: BNNeck(2, 3, 4, rng=g), feats(4, 2, 3))),
        Check("CrossAttentionFusion", _module(lambda g: CrossAttentionFusion(3, rng=g), pair(2, 3, 3, 2))),
        Check("C2Module (masks + split)", _module(lambda g: C2Module(4, 2, rng=g), pair(2, 4, 3, 3))),
        Check("C2Module without m_co", _module(lambda g: C2Module(4, 2, use_m_co=False, rng=g), pair(2, 4, 3, 3))),
        Check("C2Module without m_di", _module(lambda g: C2Module(4, 2, use_m_di=False, rng=g), pair(2, 4, 3, 3))),
        Check("temporal + horizontal pooling", _op(
            lambda x: horizontal_pool(temporal_pool(T.reshape(x, (2, 3, 4, 4, 2))), 2),
            lambda r: _distinct(r, 6, 4, 4, 2))),
        Check("GaitHead", _module(lambda g: GaitHead(4, _head_config(), g),
                                  lambda r: [_distinct(r, 8, 4, 4, 2)],
                                  call=lambda m, x: m(x, 4))),
        Check("triplet_loss", _op(lambda e: triplet_loss(e, np.array([0, 0, 1, 1, 2]), 0.2),
                                  lambda r: _normal(r, 5, 2, 3))),
        Check("softmax_ce", _op(lambda z: softmax_ce(z, np.array([0, 2, 1])), lambda r: _normal(r, 3, 2, 4))),
    ]


def tiny_config(**changes) -> ModelConfig:
    base = dict(variant="++", stem=2, widths=(2, 2, 3, 4), blocks=(1, 1, 1, 1), parts=2, embed_dim=3,
                num_classes=2, se_reduction=2, input_hw=(8, 6))
    base.update(changes)
    return ModelConfig(**base)


def end_to_end_check(config: ModelConfig | None = None, seed: int = 0) -> Check:
    """Triplet + softmax loss of a tiny model w.r.t. every parameter."""
    config = config or tiny_config()

    def builder(rng):
        model = build(config, seed).to(F64)
        h, w = config.input_hw
        batch = {m: rng.uniform(0, 1, (4, 2, c, h, w)) for m, c in
                 (("sil", 1), ("par", 1), ("flow", 3)) if m in config.modalities}
        labels = np.array([0, 0, 1, 1])

        def loss(*_params):
            emb, logits = model(batch)
            return triplet_loss(emb, labels, 0.2) + softmax_ce(logits, labels)

        return loss, model.parameters(), 4

    return Check(f"end-to-end {config.variant} loss", builder, END_TO_END_TOL)


def all_checks() -> list[Check]:
    return op_checks() + block_checks() + [end_to_end_check()]


def run_suite(checks=None, seed: int = 0, report=None) -> list[tuple[str, GradCheckReport]]:
    """Run the checks; ``report(name, result)`` is called after each one."""
    results = []
    for i, check in enumerate(checks or all_checks()):
        rng = np.random.default_rng([seed, i])
        fn, inputs, max_entries = check.build(rng)
        res = grad_check(fn, inputs, epsilon=1e-6, tolerance=check.tolerance, max_entries=max_entries, seed=seed)
        results.append((check.name, res))
        if report is not None:
            report(check.name, res)
    return results
