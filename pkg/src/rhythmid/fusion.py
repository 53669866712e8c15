"""Combining rhythm embeddings with precomputed acoustic x-vectors.

Both streams pass through their own linear projection before being joined
(concatenated by default) and classified by an affine head. The rhythm encoder
stays trainable; x-vectors are constants. :class:`XVectorBaseline` is the
x-vector-only linear classifier used for comparison.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from rhythmid import tensor_core as tc
from rhythmid._io import atomic_write_text
from rhythmid.rhythm_encoder import Batch, RhythmEncoderModel, xavier_uniform
from rhythmid.tensor_core import Tensor


class XVectorError(ValueError):
    pass


@dataclass
class XVectorTable:
    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self.entries

    def stack(self, utt_ids: Sequence[str]) -> np.ndarray:
        """Rows for ``utt_ids`` in order; raises naming the first missing id."""
        missing = [u for u in utt_ids if u not in self.entries]
        if missing:
            raise XVectorError(f"no x-vector for utterance {missing[0]!r} ({len(missing)} missing)")
        return np.stack([self.entries[u] for u in utt_ids]) if utt_ids else np.zeros((0, self.dim))

    def missing(self, utt_ids: Iterable[str]) -> list[str]:
        return [u for u in utt_ids if u not in self.entries]

    def to_text(self) -> str:
        rows = [f"dim\t{self.dim}"]
        rows += [u + "\t" + "\t".join(repr(float(x)) for x in vec) for u, vec in self.entries.items()]
        return "\n".join(rows) + "\n"


def load_xvectors(source: str | os.PathLike | Iterable[str]) -> XVectorTable:
    """Parse the x-vector TSV format: ``dim<TAB>D`` then ``utt_id<TAB>v1 ... vD`` rows."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    else:
        lines = [line.rstrip("\n") for line in source]
    if not lines:
        raise XVectorError("x-vector file is empty (missing 'dim' header)")
    head = lines[0].split("\t")
    if len(head) != 2 or head[0] != "dim" or not head[1].isdigit() or int(head[1]) < 1:
        raise XVectorError("line 1: expected header 'dim<TAB>D'")
    dim = int(head[1])
    table = XVectorTable(dim)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        utt_id, values = parts[0], parts[1:]
        if len(values) != dim:
            raise XVectorError(f"line {lineno}: {len(values)} values, expected {dim}")
        if utt_id in table.entries:
            raise XVectorError(f"line {lineno}: duplicate utterance id {utt_id!r}")
        try:
            vec = np.array([float(v) for v in values])
        except ValueError:
            raise XVectorError(f"line {lineno}: non-numeric field") from None
        if not np.isfinite(vec).all():
            raise XVectorError(f"line {lineno}: non-finite value")
        table.entries[utt_id] = vec
    return table


def write_xvectors(path: str | os.PathLike, table: XVectorTable) -> None:
    atomic_write_text(path, table.to_text())


def _linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> tuple[Tensor, Tensor]:
    return (Tensor(xavier_uniform(rng, fan_in, fan_out, dtype), requires_grad=True),
            Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))


class FusionAssembly:
    """Projected rhythm + x-vector streams feeding a shared classification head."""

    def __init__(self, rhythm: RhythmEncoderModel, params: dict[str, Tensor], fuse: str = "concat"):
        if fuse not in ("concat", "sum"):
            raise ValueError(f"unknown fusion operator {fuse!r}")
        self.rhythm = rhythm
        self.own = params
        self.fuse = fuse
        px, pr = params["proj_x.weight"].shape[1], params["proj_r.weight"].shape[1]
        if px != pr:
            raise ValueError("projection output dims differ")
        expected = 2 * px if fuse == "concat" else px
        if params["head.weight"].shape[0] != expected:
            raise ValueError(f"head input dim {params['head.weight'].shape[0]} != {expected}")

    @classmethod
    def create(cls, rhythm: RhythmEncoderModel, dim_x: int, n_speakers: int, rng: np.random.Generator,
               d_proj: int = 128, fuse: str = "concat") -> "FusionAssembly":
        dtype = rhythm.dtype
        wx, bx = _linear(rng, dim_x, d_proj, dtype)
        wr, br = _linear(rng, rhythm.config.d_model, d_proj, dtype)
        wh, bh = _linear(rng, 2 * d_proj if fuse == "concat" else d_proj, n_speakers, dtype)
        params = {"proj_x.weight": wx, "proj_x.bias": bx, "proj_r.weight": wr, "proj_r.bias": br,
                  "head.weight": wh, "head.bias": bh}
        return cls(rhythm, params, fuse)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"fusion.{k}": v for k, v in self.own.items()}
        out.update({f"rhythm.{k}": v for k, v in self.rhythm.params.items()})
        return out

    def logits(self, batch: Batch, xvec: np.ndarray, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        p = self.own
        if xvec.shape != (batch.token_ids.shape[0], p["proj_x.weight"].shape[0]):
            raise XVectorError(f"x-vector batch shape {xvec.shape} does not match the assembly")
        x = Tensor(xvec.astype(self.rhythm.dtype, copy=False))
        zx = tc.add(tc.matmul(x, p["proj_x.weight"]), p["proj_x.bias"])
        pooled = self.rhythm.pool(batch, training, rng)
        zr = tc.add(tc.matmul(pooled, p["proj_r.weight"]), p["proj_r.bias"])
        z = tc.concat_last_dim([zx, zr]) if self.fuse == "concat" else tc.add(zx, zr)
        return tc.add(tc.matmul(z, p["head.weight"]), p["head.bias"])


def fused_forward(assembly: FusionAssembly, batch: Batch, xvec: np.ndarray, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    return assembly.logits(batch, xvec, training, rng)


class XVectorBaseline:
    """A single affine map from x-vectors to speaker logits."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    @classmethod
    def create(cls, dim_x: int, n_speakers: int, rng: np.random.Generator, dtype=np.float32) -> "XVectorBaseline":
        w, b = _linear(rng, dim_x, n_speakers, dtype)
        return cls({"head.weight": w, "head.bias": b})

    @property
    def dim(self) -> int:
        return self.params["head.weight"].shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def logits(self, xvec: np.ndarray) -> Tensor:
        if xvec.ndim != 2 or xvec.shape[1] != self.dim:
            raise XVectorError(f"x-vector batch shape {xvec.shape} does not match head input dim {self.dim}")
        x = Tensor(xvec.astype(self.params["head.weight"].dtype, copy=False))
        return tc.add(tc.matmul(x, self.params["head.weight"]), self.params["head.bias"])


def xvector_baseline_forward(head: XVectorBaseline, xvec: np.ndarray) -> Tensor:
    return head.logits(xvec)


def preflight(utt_ids: Iterable[str], table: XVectorTable) -> None:
    """Fail listing every utterance that has no x-vector."""
    missing = table.missing(utt_ids)
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise XVectorError(f"{len(missing)} utterances have no x-vector: {shown}")
