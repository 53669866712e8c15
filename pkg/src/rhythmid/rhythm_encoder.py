"""Transformer encoder that maps a FACS token sequence to a speaker prediction.

Architecture: token embedding plus fixed sinusoidal positions, a stack of
post-norm blocks whose self-attention only sees tokens within a fixed radius,
masked mean pooling over time, and one affine classification head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from rhythmid import tensor_core as tc
from rhythmid.facs import PAD, FacsSequence
from rhythmid.tensor_core import Tensor


@dataclass
class RhythmEncoderConfig:
    vocab_size: int
    n_speakers: int
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 4
    ffn_dim: int | None = None
    attn_window_radius: int = 2
    dropout_rate: float = 0.1
    max_len: int = 512
    activation: str = "gelu"

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.attn_window_radius < 0:
            raise ValueError("attn_window_radius must be >= 0")
        if self.max_len < 1 or self.n_layers < 1 or self.vocab_size < 4 or self.n_speakers < 1:
            raise ValueError("max_len, n_layers, n_speakers must be >= 1 and vocab_size >= 4")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    token_ids: np.ndarray  # (batch, length), PAD-padded
    valid: np.ndarray  # (batch, length) bool
    labels: np.ndarray | None = None


def make_batch(seqs: Sequence[np.ndarray | FacsSequence], labels: Sequence[int] | None = None) -> Batch:
    arrays = [s.token_ids if isinstance(s, FacsSequence) else np.asarray(s) for s in seqs]
    if not arrays:
        raise ValueError("empty batch")
    length = max(len(a) for a in arrays)
    ids = np.full((len(arrays), length), PAD, dtype=np.int64)
    for i, a in enumerate(arrays):
        ids[i, : len(a)] = a
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return Batch(ids, ids != PAD, lab)


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    rate = 10000.0 ** (-(np.arange(0, d_model, 2, dtype=np.float64)) / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d_model // 2])
    return pe


def local_attention_mask(seq_len: int, radius: int) -> np.ndarray:
    """Boolean (seq_len, seq_len) matrix, true where ``|i - j| <= radius``."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    idx = np.arange(seq_len)
    return np.abs(idx[:, None] - idx[None, :]) <= radius


def band_allowed(valid: np.ndarray, radius: int) -> np.ndarray:
    """Banded form of the local mask AND the key validity mask.

    Entry ``[b, i, o]`` says whether query ``i`` may attend to key
    ``i + o - radius``. Padded queries that would see no valid key attend to
    themselves only; they never feed valid positions or the pooled output.
    """
    _, t = valid.shape
    width = 2 * radius + 1
    padded = np.pad(valid, ((0, 0), (radius, radius)))
    allowed = np.stack([padded[:, o : o + t] for o in range(width)], axis=-1)
    empty = ~allowed.any(axis=-1)
    allowed[..., radius] |= empty
    return allowed


def _additive(allowed: np.ndarray, dtype) -> np.ndarray:
    return np.where(allowed, 0.0, -np.inf).astype(dtype)[:, None]


class RhythmEncoderModel:
    """Parameters plus forward pass. ``params`` preserves the documented order."""

    def __init__(self, config: RhythmEncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._pe = positional_encoding(config.max_len, config.d_model)

    @property
    def dtype(self):
        return self.params["embedding"].dtype

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def encode(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Final-layer representations, shape (batch, length, d_model)."""
        cfg, p = self.config, self.params
        ids, valid = batch.token_ids, batch.valid
        b, t = ids.shape
        if t > cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {cfg.max_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise IndexError(f"token id outside [0, {cfg.vocab_size})")
        if not valid.any(axis=1).all():
            raise ValueError("batch contains an all-PAD row")
        if training and cfg.dropout_rate > 0 and rng is None:
            raise ValueError("training with dropout needs an rng")

        x = tc.embedding_lookup(p["embedding"], ids)
        x = tc.add(x, self._pe[:t].astype(self.dtype))
        x = tc.dropout(x, cfg.dropout_rate, rng, training)
        radius = min(cfg.attn_window_radius, t - 1)
        mask = _additive(band_allowed(valid, radius), self.dtype)
        act = tc.gelu if cfg.activation == "gelu" else tc.relu
        h, dh = cfg.n_heads, cfg.head_dim

        def heads(z: Tensor) -> Tensor:
            return tc.permute(tc.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            q = heads(tc.add(tc.matmul(x, p[pre + "attn.q.weight"]), p[pre + "attn.q.bias"]))
            k = heads(tc.add(tc.matmul(x, p[pre + "attn.k.weight"]), p[pre + "attn.k.bias"]))
            v = heads(tc.add(tc.matmul(x, p[pre + "attn.v.weight"]), p[pre + "attn.v.bias"]))
            scores = tc.scale(tc.band_scores(q, k, radius), 1.0 / math.sqrt(dh))
            weights = tc.dropout(tc.row_softmax(scores, mask), cfg.dropout_rate, rng, training)
            ctx = tc.reshape(tc.permute(tc.band_mix(weights, v, radius), (0, 2, 1, 3)), (b, t, cfg.d_model))
            attn = tc.add(tc.matmul(ctx, p[pre + "attn.out.weight"]), p[pre + "attn.out.bias"])
            x = tc.layer_norm(tc.add(x, attn), p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            f = act(tc.add(tc.matmul(x, p[pre + "ffn.in.weight"]), p[pre + "ffn.in.bias"]))
            f = tc.add(tc.matmul(f, p[pre + "ffn.out.weight"]), p[pre + "ffn.out.bias"])
            f = tc.dropout(f, cfg.dropout_rate, rng, training)
            x = tc.layer_norm(tc.add(x, f), p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        return x

    def pool(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return tc.mean_pool_masked(self.encode(batch, training, rng), batch.valid)

    def head(self, pooled: Tensor) -> Tensor:
        return tc.add(tc.matmul(pooled, self.params["head.weight"]), self.params["head.bias"])

    def forward(self, batch: Batch, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        pooled = self.pool(batch, training, rng)
        return pooled, self.head(pooled)

    def logits(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.forward(batch, training, rng)[1]


def parameter_shapes(cfg: RhythmEncoderConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter, in checkpoint order."""
    d, f = cfg.d_model, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {"embedding": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        for proj in ("q", "k", "v", "out"):
            shapes[pre + f"attn.{proj}.weight"] = (d, d)
            shapes[pre + f"attn.{proj}.bias"] = (d,)
        shapes[pre + "ln1.gain"] = (d,)
        shapes[pre + "ln1.bias"] = (d,)
        shapes[pre + "ffn.in.weight"] = (d, f)
        shapes[pre + "ffn.in.bias"] = (f,)
        shapes[pre + "ffn.out.weight"] = (f, d)
        shapes[pre + "ffn.out.bias"] = (d,)
        shapes[pre + "ln2.gain"] = (d,)
        shapes[pre + "ln2.bias"] = (d,)
    shapes["head.weight"] = (d, cfg.n_speakers)
    shapes["head.bias"] = (cfg.n_speakers,)
    return shapes


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_model(config: RhythmEncoderConfig, rng: np.random.Generator, dtype=np.float32) -> RhythmEncoderModel:
    config.validate()
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name == "embedding":
            value = rng.normal(0.0, config.d_model**-0.5, size=shape).astype(dtype)
        elif name.endswith(".weight"):
            value = xavier_uniform(rng, *shape, dtype=dtype)
        elif name.endswith(".gain"):
            value = np.ones(shape, dtype=dtype)
        else:
            value = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(value, requires_grad=True)
    return RhythmEncoderModel(config, params)


def embed_utterance(model: RhythmEncoderModel, seq: FacsSequence | np.ndarray) -> np.ndarray:
    """Pooled pre-head rhythm embedding in evaluation mode."""
    with tc.no_grad():
        return model.pool(make_batch([seq]), training=False).data[0].copy()
