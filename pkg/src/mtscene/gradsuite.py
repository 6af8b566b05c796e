"""Named finite-difference checks for every differentiable op and sub-network.

Each case builds, for one seed, a scalar function and the float64 tensors to
differentiate. Sub-network cases sample a few parameter tensors per seed so
that a full sweep covers the network without checking every weight every time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from . import losses as L
from . import nn
from .encoder import EncoderConfig, encoder_forward, init_encoder, partial_conv
from .gradcheck import grad_check
from .instance import InstanceDecoderConfig, init_instance, init_non_bottleneck_1d, instance_decode, non_bottleneck_1d
from .semantic import SemanticDecoderConfig, cfil, init_cfil, init_nfcl, init_semantic, nfcl, semantic_decode
from .tensor import (Tensor, concat, exp, getitem, log, matmul, maximum, mean, precision, relu, sigmoid, split,
                     sqrt, square, tabs, tsum)

Build = Callable[[np.random.Generator], Tuple[Callable[..., Tensor], Dict[str, Tensor]]]

TOY_WIDTHS = (16, 32, 64, 128)
TOY_DEPTHS = (1, 1, 2, 1)
MODULE_INPUT = 64
# share of sampled points allowed to be excluded as non-differentiable
MAX_KINK_FRACTION = 0.05


@dataclass(frozen=True)
class GradCase:
    name: str
    group: str  # "op" or "module"
    build: Build
    tensors_per_seed: Optional[int] = None
    # step override, glob pattern -> step; a parameter shift moves every
    # downstream ReLU, while BN shifts need a larger step against roundoff
    eps: Optional[Dict[str, float]] = None


@dataclass
class GradRow:
    name: str
    group: str
    seeds: int
    checked: int
    kinks: int
    max_rel_error: float
    passed: bool


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _projection(rng, shape):
    """Fixed random weights turning a tensor output into a scalar."""
    return rng.normal(size=shape)


def _scalar(out: Tensor, w: np.ndarray) -> Tensor:
    return tsum(out * w)


def _unary(op, low=None):
    def build(rng):
        x = rng.normal(size=(3, 4))
        if low is not None:
            x = np.abs(x) + low
        w = _projection(rng, (3, 4))
        return (lambda x: _scalar(op(x), w)), {"x": _t(x)}
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(3, 1))
        if positive_b:
            b = np.abs(b) + 0.5
        w = _projection(rng, (2, 3, 4))
        return (lambda a, b: _scalar(op(a, b), w)), {"a": _t(a), "b": _t(b)}
    return build


def _conv_case(stride, padding, bias=True):
    def build(rng):
        x = rng.normal(size=(2, 3, 7, 7))
        wt = rng.normal(size=(4, 3, 3, 3))
        ho = (7 + 2 * padding - 3) // stride + 1
        if (7 + 2 * padding - 3) % stride:
            raise AssertionError("conv case must have an integral output extent")
        w = _projection(rng, (2, 4, ho, ho))
        inputs = {"x": _t(x), "weight": _t(wt)}
        if bias:
            inputs["bias"] = _t(rng.normal(size=4))
            return (lambda x, weight, bias: _scalar(F.conv2d(x, weight, bias, stride, padding), w)), inputs
        return (lambda x, weight: _scalar(F.conv2d(x, weight, None, stride, padding), w)), inputs
    return build


def _bn_case(training):
    def build(rng):
        x = rng.normal(size=(3, 4, 3, 3)) * 2 + 1
        c = 4
        rm, rv = rng.normal(size=c), np.abs(rng.normal(size=c)) + 0.5
        w = _projection(rng, x.shape)

        def f(x, gamma, beta):
            p = F.BNParams(gamma, beta, Tensor(rm.copy()), Tensor(rv.copy()))
            return _scalar(F.batch_norm(x, p, training), w)
        return f, {"x": _t(x), "gamma": _t(rng.normal(size=c)), "beta": _t(rng.normal(size=c))}
    return build


def _map_case(fn, in_shape, out_shape):
    def build(rng):
        x = rng.normal(size=in_shape)
        w = _projection(rng, out_shape)
        return (lambda x: _scalar(fn(x), w)), {"x": _t(x)}
    return build


def _params_case(init_fn, fwd, x_shape):
    """Check a parametrized block with respect to its input and every parameter."""
    def build(rng):
        init = nn.Initializer(int(rng.integers(1 << 30)))
        init_fn(init)
        params = init.params
        for k, t in params.items():
            # move BN affine params away from their init so gradients are generic
            if k.endswith((".gamma", ".beta", ".bias")):
                t.data = t.data + 0.3 * rng.normal(size=t.shape)
        x = rng.normal(size=x_shape)
        holder = {}

        def f(x, **trainables):
            merged = dict(params)
            merged.update({k.replace("__", "."): v for k, v in trainables.items()})
            out = fwd(x, merged)
            if "w" not in holder:
                holder["w"] = _projection(np.random.default_rng(1), out.shape)
            return _scalar(out, holder["w"])
        inputs = {"x": _t(x)}
        inputs.update({k.replace(".", "__"): params[k] for k in params if not nn.is_buffer(k)})
        return f, inputs
    return build


def _loss_cases() -> List[GradCase]:
    def semantic(rng):
        logits = rng.normal(size=(2, 5, 4, 4))
        labels = rng.integers(0, 5, size=(2, 4, 4))
        labels[0, 0, :2] = 255
        return (lambda logits: L.semantic_loss(logits, labels, 255)), {"logits": _t(logits)}

    def center(rng):
        pred = rng.uniform(0.1, 0.9, size=(2, 1, 4, 4))
        target = rng.uniform(0, 1, size=(2, 1, 4, 4))
        return (lambda pred: L.center_loss(pred, target)), {"pred": _t(pred)}

    def offset(rng):
        pred = rng.normal(size=(2, 2, 4, 4))
        target = rng.normal(size=(2, 2, 4, 4))
        mask = rng.random((2, 4, 4)) < 0.6
        mask[0, 0, 0] = True
        return (lambda pred: L.offset_loss(pred, target, mask)), {"pred": _t(pred)}

    def orientation(rng):
        f = rng.normal(size=(2, 2, 4, 4)) + 0.5
        ang = rng.uniform(0, 2 * np.pi, size=(2, 4, 4))
        t = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        mask = rng.random((2, 4, 4)) < 0.7
        mask[0, 0, 0] = True
        return (lambda f: L.orientation_loss(f, t, 1.5, mask)), {"f": _t(f)}

    def scene(rng):
        logits = rng.normal(size=(3, 4))
        labels = rng.integers(0, 4, size=3)
        return (lambda logits: L.scene_loss(logits, labels)), {"logits": _t(logits)}

    return [
        GradCase("loss.semantic", "op", semantic),
        GradCase("loss.center", "op", center),
        GradCase("loss.offset", "op", offset),
        GradCase("loss.orientation", "op", orientation),
        GradCase("loss.scene", "op", scene),
    ]


def _getitem_case(rng):
    x = rng.normal(size=(4, 5))
    idx = (slice(1, 3), np.array([0, 2, 2, 4]))
    w = _projection(rng, (2, 4))
    return (lambda x: _scalar(getitem(x, idx), w)), {"x": _t(x)}


def _split_case(rng):
    x = rng.normal(size=(2, 6, 3))
    w1, w2 = _projection(rng, (2, 2, 3)), _projection(rng, (2, 4, 3))

    def f(x):
        a, b = split(x, [2, 4], axis=1)
        return _scalar(a, w1) + _scalar(b * b, w2)
    return f, {"x": _t(x)}


def _concat_case(rng):
    a, b = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 1, 2))
    w = _projection(rng, (2, 4, 2))
    return (lambda a, b: _scalar(concat([a, b], axis=1), w)), {"a": _t(a), "b": _t(b)}


def _matmul_case(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    w = _projection(rng, (2, 3, 5))
    return (lambda a, b: _scalar(matmul(a, b), w)), {"a": _t(a), "b": _t(b)}


def _linear_case(rng):
    x, wt, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)
    w = _projection(rng, (3, 2))
    return (lambda x, weight, bias: _scalar(F.linear(x, weight, bias), w)), {"x": _t(x), "weight": _t(wt), "bias": _t(b)}


def _reduce_case(rng):
    x = rng.normal(size=(2, 3, 4))
    w = _projection(rng, (2, 4))
    return (lambda x: _scalar(tsum(x, axis=1), w) + mean(x * x)), {"x": _t(x)}


def _shape_case(rng):
    x = rng.normal(size=(2, 3, 4))
    w = _projection(rng, (4, 6))
    return (lambda x: _scalar(x.transpose((2, 0, 1)).reshape(4, 6), w)), {"x": _t(x)}


def op_cases() -> List[GradCase]:
    cases = [
        GradCase("add", "op", _binary(lambda a, b: a + b)),
        GradCase("sub", "op", _binary(lambda a, b: a - b)),
        GradCase("mul", "op", _binary(lambda a, b: a * b)),
        GradCase("div", "op", _binary(lambda a, b: a / b, positive_b=True)),
        GradCase("neg", "op", _unary(lambda x: -x)),
        GradCase("exp", "op", _unary(exp)),
        GradCase("log", "op", _unary(log, low=0.2)),
        GradCase("sqrt", "op", _unary(sqrt, low=0.2)),
        GradCase("abs", "op", _unary(tabs)),
        GradCase("square", "op", _unary(square)),
        GradCase("maximum", "op", _unary(lambda x: maximum(x, 0.1))),
        GradCase("relu", "op", _unary(relu)),
        GradCase("sigmoid", "op", _unary(sigmoid)),
        GradCase("sum_mean", "op", _reduce_case),
        GradCase("reshape_transpose", "op", _shape_case),
        GradCase("getitem", "op", _getitem_case),
        GradCase("concat", "op", _concat_case),
        GradCase("split", "op", _split_case),
        GradCase("matmul", "op", _matmul_case),
        GradCase("linear", "op", _linear_case),
        GradCase("conv2d", "op", _conv_case(1, 1)),
        GradCase("conv2d_stride2", "op", _conv_case(2, 0, bias=False)),
        GradCase("batch_norm_train", "op", _bn_case(True)),
        GradCase("batch_norm_eval", "op", _bn_case(False)),
        GradCase("adaptive_avg_pool", "op", _map_case(lambda x: F.adaptive_avg_pool(x, 5, 5), (2, 3, 8, 8), (2, 3, 5, 5))),
        GradCase("adaptive_avg_pool_global", "op", _map_case(lambda x: F.adaptive_avg_pool(x, 1, 1), (2, 3, 4, 6), (2, 3, 1, 1))),
        GradCase("bilinear_upsample", "op", _map_case(lambda x: F.bilinear_upsample(x, 7, 9), (2, 3, 3, 4), (2, 3, 7, 9))),
        GradCase("global_avg_pool", "op", _map_case(F.global_avg_pool, (2, 3, 4, 4), (2, 3))),
        GradCase("log_softmax", "op", _map_case(lambda x: F.log_softmax(x, axis=1), (2, 4, 3), (2, 4, 3))),
        GradCase("softmax", "op", _map_case(lambda x: F.softmax(x, axis=1), (2, 4, 3), (2, 4, 3))),
        GradCase(
            "partial_conv", "op",
            _params_case(lambda i: i.conv("p", 2, 2, 3, bias=False),
                         lambda x, p: partial_conv(x, nn.conv_params(p, "p", padding=1), 0.25),
                         (2, 8, 5, 5)),
        ),
        GradCase(
            "nfcl", "op",
            _params_case(lambda i: init_nfcl(i, "g", 4), lambda x, p: nfcl(x, p, "g", True), (2, 4, 3, 3)),
        ),
        GradCase(
            "cfil", "op",
            _params_case(lambda i: init_cfil(i, "c", 4, 3), lambda x, p: cfil(x, p, "c", True), (2, 4, 6, 6)),
        ),
        GradCase(
            "non_bottleneck_1d", "op",
            _params_case(lambda i: init_non_bottleneck_1d(i, "nb", 4),
                         lambda x, p: non_bottleneck_1d(x, p, "nb", True), (2, 4, 5, 5)),
        ),
    ]
    return cases + _loss_cases()


def _module_case(name: str, init_fn, fwd, x_shape, tensors_per_seed: int,
                 eps: Optional[Dict[str, float]] = None) -> GradCase:
    return GradCase(name, "module", _params_case(init_fn, fwd, x_shape), tensors_per_seed, eps)


def _encoder_feats_shapes(n: int, size: int) -> List[Tuple[int, ...]]:
    return [(n, c, size // f, size // f) for c, f in zip(TOY_WIDTHS, (4, 8, 16, 32))]


def module_cases() -> List[GradCase]:
    ecfg = EncoderConfig(TOY_WIDTHS, TOY_DEPTHS)
    scfg = SemanticDecoderConfig(embed_dim=16, num_classes=6, nfcl_layers=frozenset({1, 2, 3}),
                                 cfil_position="semantic")
    icfg = InstanceDecoderConfig(width=(16, 8, 8), blocks_per_layer=1)
    shapes = _encoder_feats_shapes(2, MODULE_INPUT)

    def enc_fwd(x, p):
        feats = encoder_forward(x, ecfg, p, training=True)
        return concat([f.reshape(f.shape[0], -1) for f in feats], axis=1)

    def split_feats(x):
        # a single flat input is carved into the four stage features
        sizes = [int(np.prod(s[1:])) for s in shapes]
        parts = split(x, sizes, axis=1)
        return [part.reshape(*s) for part, s in zip(parts, shapes)]

    flat = (2, sum(int(np.prod(s[1:])) for s in shapes))

    def sem_fwd(x, p):
        return semantic_decode(split_feats(x), scfg, p, training=True, out_size=(MODULE_INPUT, MODULE_INPUT))

    def inst_fwd(x, p):
        levels = instance_decode(split_feats(x), icfg, p, training=True)
        return concat([concat([lv.center, lv.offset, lv.orientation], axis=1).reshape(2, -1) for lv in levels], axis=1)

    return [
        _module_case("module.encoder", lambda i: init_encoder(i, ecfg), enc_fwd, (2, 4, MODULE_INPUT, MODULE_INPUT), 4,
                     eps={"x": 1e-4, "*": 1e-6}),
        _module_case("module.semantic_path", lambda i: init_semantic(i, scfg, TOY_WIDTHS), sem_fwd, flat, 4,
                     eps={"*beta": 3e-4, "*": 1e-4}),
        _module_case("module.instance_path", lambda i: init_instance(i, icfg, TOY_WIDTHS), inst_fwd, flat, 4),
    ]


def all_cases() -> List[GradCase]:
    return op_cases() + module_cases()


def run_case(case: GradCase, seeds: Sequence[int], eps: float = 1e-4, coords: int = 24,
             tol: float = 1e-5) -> GradRow:
    worst, checked, kinks = 0.0, 0, 0
    eps = case.eps if case.eps is not None else eps
    for seed in seeds:
        rng = np.random.default_rng([seed, 991])
        with precision("double"):
            f, inputs = case.build(rng)
            if case.tensors_per_seed is not None:
                names = [k for k in inputs if k != "x"]
                keep = rng.choice(len(names), size=min(case.tensors_per_seed, len(names)), replace=False)
                chosen = {"x": inputs["x"], **{names[i]: inputs[names[i]] for i in sorted(keep)}}
                fixed = {k: v for k, v in inputs.items() if k not in chosen}
                fn = lambda **kw: f(**kw, **fixed)
                for t in fixed.values():
                    t.requires_grad = False
                res = grad_check(fn, chosen, eps=eps, max_coords=coords, rng=rng)
            else:
                res = grad_check(f, inputs, eps=eps, max_coords=coords, rng=rng)
        worst = max(worst, res.max_rel_error)
        checked += res.checked
        kinks += len(res.kinks)
    ok = checked > 0 and worst < tol and kinks <= MAX_KINK_FRACTION * (checked + kinks)
    return GradRow(case.name, case.group, len(seeds), checked, kinks, worst, ok)


def run_suite(seeds: Sequence[int], eps: float = 1e-4, coords: int = 24, tol: float = 1e-5,
              names: Optional[Sequence[str]] = None) -> List[GradRow]:
    cases = all_cases()
    if names is not None:
        unknown = set(names) - {c.name for c in cases}
        if unknown:
            raise ValueError(f"unknown gradient cases {sorted(unknown)}")
        cases = [c for c in cases if c.name in names]
    return [run_case(c, seeds, eps, coords, tol) for c in cases]


def format_rows(rows: Sequence[GradRow]) -> str:
    width = max(len(r.name) for r in rows)
    out = [f"{'check':<{width}}  group   seeds  checked  kinks  max_rel_error  status"]
    for r in rows:
        out.append(f"{r.name:<{width}}  {r.group:<6}  {r.seeds:>5}  {r.checked:>7}  {r.kinks:>5}  "
                   f"{r.max_rel_error:>13.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(out)
