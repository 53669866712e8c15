"""Finite-difference checks for every differentiable op and a small full encoder."""

from __future__ import annotations

from typing import Callable

import numpy as np

from rhythmid import tensor_core as tc
from rhythmid.rhythm_encoder import RhythmEncoderConfig, init_model, make_batch
from rhythmid.tensor_core import Tensor, grad_check

TOLERANCE = 1e-4


def _t(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Reduce to a scalar through fixed random weights so every output entry matters."""
    w = rng.normal(size=out.shape)
    return lambda y: tc.tsum(tc.mul(y, w))


def _case(rng: np.random.Generator, fn: Callable[..., Tensor], *inputs: Tensor) -> float:
    with tc.no_grad():
        reduce = _project(fn(*inputs), rng)
    return grad_check(lambda *xs: reduce(fn(*xs)), list(inputs))


def op_cases(seed: int) -> dict[str, float]:
    """Max relative error per op for one random draw."""
    rng = np.random.default_rng(seed)
    mask = np.where(rng.random((3, 4)) < 0.3, -np.inf, 0.0)
    mask[:, 0] = 0.0
    ids = rng.integers(0, 5, size=(2, 3))
    pool_mask = np.array([[True, True, False, True], [False, True, True, False]])
    drop_seed = int(rng.integers(1 << 30))
    targets = rng.integers(0, 4, size=3)
    return {
        "matmul": _case(rng, tc.matmul, _t(rng, 4, 3), _t(rng, 3, 2)),
        "batched_matmul": _case(rng, tc.matmul, _t(rng, 2, 3, 4), _t(rng, 4, 2)),
        "add": _case(rng, tc.add, _t(rng, 3, 4), _t(rng, 4)),
        "mul": _case(rng, tc.mul, _t(rng, 3, 4), _t(rng, 3, 4)),
        "scale": _case(rng, lambda x: tc.scale(x, 0.37), _t(rng, 3, 4)),
        "sum": _case(rng, tc.tsum, _t(rng, 3, 4)),
        "reshape": _case(rng, lambda x: tc.reshape(x, (2, 6)), _t(rng, 3, 4)),
        "permute": _case(rng, lambda x: tc.permute(x, (2, 0, 1)), _t(rng, 2, 3, 4)),
        "concat_last_dim": _case(rng, lambda a, b: tc.concat_last_dim([a, b]), _t(rng, 3, 4), _t(rng, 3, 2)),
        "row_softmax": _case(rng, lambda x: tc.row_softmax(x, mask), _t(rng, 3, 4)),
        "layer_norm": _case(rng, tc.layer_norm, _t(rng, 2, 8), _t(rng, 8), _t(rng, 8)),
        "gelu": _case(rng, tc.gelu, _t(rng, 3, 4)),
        "relu": _case(rng, tc.relu, Tensor(rng.uniform(0.1, 1, (3, 4)) * rng.choice([-1, 1], (3, 4)), requires_grad=True)),
        "embedding_lookup": _case(rng, lambda w: tc.embedding_lookup(w, ids), _t(rng, 5, 4)),
        "dropout": _case(rng, lambda x: tc.dropout(x, 0.3, np.random.default_rng(drop_seed), True), _t(rng, 3, 4)),
        "mean_pool_masked": _case(rng, lambda x: tc.mean_pool_masked(x, pool_mask), _t(rng, 2, 4, 3)),
        "cross_entropy": grad_check(lambda x: tc.cross_entropy(x, targets), [_t(rng, 3, 4)]),
        "band_scores": _case(rng, lambda q, k: tc.band_scores(q, k, 2), _t(rng, 2, 6, 3), _t(rng, 2, 6, 3)),
        "band_mix": _case(rng, lambda w, v: tc.band_mix(w, v, 1), _t(rng, 2, 5, 3), _t(rng, 2, 5, 4)),
    }


def encoder_case(seed: int, n_layers: int = 2, training: bool = False) -> float:
    """Max relative error over every parameter of a tiny 64-bit encoder."""
    rng = np.random.default_rng(seed)
    cfg = RhythmEncoderConfig(vocab_size=6, n_speakers=3, d_model=4, n_heads=2, n_layers=n_layers,
                              ffn_dim=6, attn_window_radius=2, dropout_rate=0.2 if training else 0.0, max_len=16)
    model = init_model(cfg, rng, dtype=np.float64)
    for p in model.params.values():  # move off the zero-bias / unit-gain point
        p.data += 0.1 * rng.normal(size=p.shape)
    batch = make_batch([rng.integers(1, 6, size=6), rng.integers(1, 6, size=4)])
    labels = rng.integers(0, 3, size=2)
    drop_seed = int(rng.integers(1 << 30))
    names = list(model.params)

    def loss(*tensors: Tensor) -> Tensor:
        model.params.update(zip(names, tensors))
        drng = np.random.default_rng(drop_seed)
        return tc.cross_entropy(model.logits(batch, training, drng), labels)

    return grad_check(loss, [model.params[n] for n in names])


def run_suite(seeds: range | list[int] = range(10), n_layers: int = 2) -> dict[str, float]:
    """Worst error per check over ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        results = op_cases(seed)
        results[f"encoder_{n_layers}_layer"] = encoder_case(seed, n_layers)
        results[f"encoder_{n_layers}_layer_dropout"] = encoder_case(seed, n_layers, training=True)
        for name, err in results.items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
