"""Central-difference gradient verification."""
from __future__ import annotations

import contextlib
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .attention import AttentionConfig, init_lmhsa, lmhsa
from .backbone import (forward, init_block_m, init_block_n, init_model, micro_config,
                       residual_block_m, residual_block_n)
from .cmt import CmtBlockConfig, cmt_block, init_cmt_block, init_irffn, init_lpu, irffn, lpu
from .errors import ContractError
from .head import init_head, pixel_attention
from .params import Init, ParamStore, Scope
from .tensor import FLOAT64, Parameter, Tape, Tensor

Source = Union[Parameter, Tensor]


def _data(src: Source) -> np.ndarray:
    return src.tensor.data if isinstance(src, Parameter) else src.data


def grad_check(build: Callable[[Tape], Tensor], params: Sequence[Source],
               eps: float = 1e-6, max_coords: int = 20,
               rng: Optional[np.random.Generator] = None,
               analytic_scale: float = 1.0) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` receives a fresh tape, must ``watch`` every entry of ``params``
    on it, and returns a scalar loss. Up to ``max_coords`` coordinates per
    parameter are sampled. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.

    ``analytic_scale`` corrupts the analytic gradient on purpose; it exists so
    the harness itself can be shown to catch a wrong derivative.
    """
    for p in params:
        if _data(p).dtype != FLOAT64:
            raise ContractError("grad_check runs in 64-bit mode only")
    rng = rng if rng is not None else np.random.default_rng(0)
    tape = Tape()
    loss = build(tape)
    tape.backward(loss)
    analytic = [np.array(p.grad, copy=True) * analytic_scale for p in params]

    def value() -> float:
        return float(build(Tape()).data)

    worst = 0.0
    for p, ga in zip(params, analytic):
        data = _data(p)
        flat = data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            up = value()
            flat[idx] = orig - eps
            down = value()
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(ga.reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- layer suite

LAYER_TOL = 1e-4
MODEL_TOL = 5e-4


@contextlib.contextmanager
def faulty_gradients(scale: float = 1.05):
    """Record every backward closure with its first input gradient scaled.

    Used to show that the suite fails on a wrong derivative.
    """
    original = Tape.record

    def record(self, out, parents, backward, op):
        def wrong(g):
            grads = list(backward(g))
            if grads and grads[0] is not None:
                grads[0] = grads[0] * scale
            return tuple(grads)
        return original(self, out, parents, wrong, op)

    Tape.record = record
    try:
        yield
    finally:
        Tape.record = original


def _store(rng: np.random.Generator, build_params: Callable[[Init], None]) -> ParamStore:
    """Float64 parameters with every entry randomized, so no gradient path is
    trivially zero (zero-initialized gates and bias tables included)."""
    store = ParamStore(np.float64)
    build_params(Init(store, rng))
    for p in store:
        p.data = p.data + rng.normal(0.0, 0.3, p.shape)
    return store


def _check_layer(fn: Callable[[Scope, Tensor], Tensor], store: ParamStore, x: np.ndarray,
                 rng: np.random.Generator, max_coords: int = 12, prefix: str = "") -> float:
    xin = Tensor(x.astype(np.float64))
    probe = fn(store.scope(None), xin)
    weights = rng.normal(size=probe.shape)

    def build(tape):
        out = fn(store.scope(tape), tape.watch(xin))
        return ops.sum_all(ops.mul(out, weights))

    params = [p for p in store if p.name.startswith(prefix)]
    return grad_check(build, params + [xin], max_coords=max_coords, rng=rng)


def _conv(rng):
    store = _store(rng, lambda i: i.conv("k", 4, 3, 3))
    return _check_layer(lambda p, x: ops.conv2d(x, p["k"], p["k_b"], stride=2, padding=1),
                        store, rng.normal(size=(2, 3, 7, 7)), rng)


def _depthwise(rng):
    store = _store(rng, lambda i: i.conv("k", 5, 5, 3, groups=5))
    return _check_layer(lambda p, x: ops.conv2d(x, p["k"], p["k_b"], stride=2, padding=1, groups=5),
                        store, rng.normal(size=(2, 5, 6, 6)), rng)


def _pool(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    return _check_layer(lambda p, t: ops.add(ops.max_pool2d(t, 2, 2), ops.avg_pool2d(t, 2, 2)),
                        ParamStore(np.float64), x, rng)


def _layer_norm(rng):
    store = _store(rng, lambda i: i.norm("ln", 6))
    return _check_layer(lambda p, x: ops.layer_norm(x, p["ln_g"], p["ln_b"]),
                        store, rng.normal(size=(3, 4, 6)), rng)


def _linear(rng):
    store = _store(rng, lambda i: i.linear("fc", 4, 7))
    return _check_layer(lambda p, x: ops.linear(x, p["fc"], p["fc_b"]),
                        store, rng.normal(size=(5, 7)), rng)


def _gelu(rng):
    return _check_layer(lambda p, x: ops.gelu(x), ParamStore(np.float64),
                        rng.normal(size=(4, 9)) * 2, rng, max_coords=36)


def _softmax_ce(rng):
    from .training import cross_entropy
    labels = rng.integers(0, 4, 5)
    return _check_layer(lambda p, x: cross_entropy(x, labels), ParamStore(np.float64),
                        rng.normal(size=(5, 4)), rng)


def _lmhsa(rng):
    cfg = AttentionConfig(dim=8, heads=2, kv_stride=2)
    store = _store(rng, lambda i: init_lmhsa(i, cfg, (4, 4)))
    return _check_layer(lambda p, x: lmhsa(x, (4, 4), cfg, p), store,
                        rng.normal(size=(2, 16, 8)), rng)


def _lpu(rng):
    store = _store(rng, lambda i: init_lpu(i, 4))
    return _check_layer(lambda p, x: lpu(x, p["dw"], p["dw_b"]), store,
                        rng.normal(size=(2, 4, 5, 5)), rng)


def _irffn(rng):
    store = _store(rng, lambda i: init_irffn(i, 4, 2))
    return _check_layer(lambda p, x: irffn(x, (4, 4), p, 2), store,
                        rng.normal(size=(2, 16, 4)), rng)


def _cmt(rng):
    cfg = CmtBlockConfig(dim=8, heads=2, irffn_ratio=2)
    store = _store(rng, lambda i: init_cmt_block(i, cfg, (4, 4)))
    return _check_layer(lambda p, x: cmt_block(x, (4, 4), cfg, p), store,
                        rng.normal(size=(2, 16, 8)), rng, max_coords=8)


def _pixel_attention(rng):
    store = _store(rng, lambda i: init_head(i, 8, 4))
    return _check_layer(lambda p, x: pixel_attention(x, p.sub("pa"))[0], store,
                        rng.normal(size=(2, 8, 3, 3)), rng, prefix="pa.")


def _residual_m(rng):
    store = _store(rng, lambda i: init_block_m(i, 3, 4))
    return _check_layer(lambda p, x: residual_block_m(x, p), store,
                        rng.normal(size=(2, 3, 6, 6)), rng)


def _residual_n(rng):
    store = _store(rng, lambda i: init_block_n(i, 3))
    return _check_layer(lambda p, x: residual_block_n(x, p), store,
                        rng.normal(size=(2, 3, 5, 5)), rng)


def _end_to_end(rng):
    from .training import cross_entropy
    cfg = micro_config()
    store = init_model(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for p in store:
        if p.kind != "weight" or p.name == "head.pa.f":
            p.data = p.data + rng.normal(0.0, 0.1, p.shape)
    images = Tensor(rng.random((2, cfg.input_channels, cfg.input_size, cfg.input_size)))
    labels = np.array([0, 3])

    def build(tape):
        out = forward(images, cfg, store, tape, training=True, rng=np.random.default_rng(5))
        return cross_entropy(out.logits, labels)

    return grad_check(build, list(store), max_coords=2, rng=rng)


SUITE: Dict[str, Tuple[Callable[[np.random.Generator], float], float]] = {
    "conv": (_conv, LAYER_TOL),
    "depthwise": (_depthwise, LAYER_TOL),
    "pool": (_pool, LAYER_TOL),
    "layernorm": (_layer_norm, LAYER_TOL),
    "linear": (_linear, LAYER_TOL),
    "gelu": (_gelu, LAYER_TOL),
    "softmax_ce": (_softmax_ce, LAYER_TOL),
    "lmhsa": (_lmhsa, LAYER_TOL),
    "lpu": (_lpu, LAYER_TOL),
    "irffn": (_irffn, LAYER_TOL),
    "cmt_block": (_cmt, LAYER_TOL),
    "pixel_attention": (_pixel_attention, LAYER_TOL),
    "residual_m": (_residual_m, LAYER_TOL),
    "residual_n": (_residual_n, LAYER_TOL),
    "end_to_end": (_end_to_end, MODEL_TOL),
}


def run_suite(only: Optional[Sequence[str]] = None, seed: int = 0,
              inject_fault: bool = False) -> Dict[str, Tuple[float, float, bool]]:
    """Run the named checks (all by default): name -> (max error, tolerance, passed)."""
    names = list(only) if only else list(SUITE)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise ContractError(f"unknown gradient checks {unknown}; choose from {list(SUITE)}")
    results = {}
    for name in names:
        fn, tol = SUITE[name]
        rng = np.random.default_rng([seed, list(SUITE).index(name)])
        with faulty_gradients() if inject_fault else contextlib.nullcontext():
            err = fn(rng)
        results[name] = (float(err), tol, bool(err < tol))
    return results
