"""Training protocol: validation split, cosine schedule, early stopping, run logs.

One loop serves three modes: rhythm-only, rhythm + x-vector fusion, and the
x-vector-only linear baseline. Every random choice (split, shuffle order,
dropout, initialisation) is derived from a single run seed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from rhythmid import checkpoint, tensor_core as tc
from rhythmid._io import atomic_write_text
from rhythmid.facs import FacsSequence, truncate
from rhythmid.fusion import FusionAssembly, XVectorBaseline, XVectorTable, preflight
from rhythmid.metrics import ConfusionMatrix, balanced_accuracy, predict
from rhythmid.rhythm_encoder import RhythmEncoderConfig, RhythmEncoderModel, make_batch
from rhythmid.tensor_core import Adam, Tensor

log = logging.getLogger(__name__)

MODES = ("rhythm_only", "fusion", "xvector_baseline")

_MODE_DEFAULTS = {
    "rhythm_only": {"epochs": 300, "lr0": 1e-4},
    "fusion": {"epochs": 300, "lr0": 1e-3},
    "xvector_baseline": {"epochs": 150, "lr0": 1e-3},
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "rhythm_only"
    epochs: int = 300
    batch_size: int = 32
    lr0: float = 1e-4
    eta_min: float = 0.0
    val_fraction: float = 0.10
    early_stop_patience: int = 15
    max_tokens: int = 512
    seed: int = 0
    grad_clip: float | None = None
    weight_decay: float = 0.0
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.max_tokens < 1:
            raise ValueError("batch_size, epochs and max_tokens must be >= 1")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        values = dict(_MODE_DEFAULTS[mode])
        values.update(overrides)
        return cls(mode=mode, **values)


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one purpose, fully determined by ``seed``."""
    tags = {"split": 1, "shuffle": 2, "dropout": 3, "init": 4, "test_split": 5, "data": 6}
    return np.random.default_rng([seed, tags[purpose]])


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Example:
    utt_id: str
    speaker: str
    label: int
    tokens: np.ndarray | None = None


def speaker_table(speakers: Sequence[str]) -> list[str]:
    return sorted(set(speakers))


def make_examples(seqs: Sequence[FacsSequence], speakers: Sequence[str], max_tokens: int | None = None) -> list[Example]:
    index = {s: i for i, s in enumerate(speakers)}
    out = []
    for s in seqs:
        if s.speaker_id not in index:
            raise ValueError(f"speaker {s.speaker_id!r} of {s.utt_id!r} is not in the speaker table")
        if len(s) == 0:
            raise ValueError(f"utterance {s.utt_id!r} has an empty FACS sequence")
        t = truncate(s, max_tokens) if max_tokens else s
        out.append(Example(s.utt_id, s.speaker_id, index[s.speaker_id], t.token_ids))
    return out


def split_train_val(dataset: Sequence[Example], val_fraction: float,
                    seed: int | np.random.Generator) -> tuple[list[Example], list[Example]]:
    """Random utterance-level split that leaves every speaker in the training part.

    Utterances are visited in a seeded random order and moved to validation
    until the target count ``max(1, round(val_fraction * n))`` is reached,
    skipping any whose move would leave its speaker without training data.
    """
    counts: dict[str, int] = {}
    for ex in dataset:
        counts[ex.speaker] = counts.get(ex.speaker, 0) + 1
    for spk, n in sorted(counts.items()):
        if n < 2:
            raise ValueError(f"speaker {spk!r} has fewer than 2 utterances")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    target = max(1, round(val_fraction * len(dataset)))
    remaining = dict(counts)
    chosen: set[int] = set()
    for i in rng.permutation(len(dataset)):
        if len(chosen) == target:
            break
        spk = dataset[i].speaker
        if remaining[spk] > 1:
            remaining[spk] -= 1
            chosen.add(int(i))
    train = [ex for i, ex in enumerate(dataset) if i not in chosen]
    val = [ex for i, ex in enumerate(dataset) if i in chosen]
    return train, val


def cosine_lr(step: int, total_steps: int, lr0: float, eta_min: float = 0.0) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# Tasks: what is trained and how a batch becomes logits
# ---------------------------------------------------------------------------


class Task(Protocol):
    speakers: list[str]

    def parameters(self) -> dict[str, Tensor]: ...

    def logits(self, items: Sequence[Example], training: bool, rng: np.random.Generator | None) -> Tensor: ...

    def header(self) -> dict: ...


@dataclass
class RhythmTask:
    model: RhythmEncoderModel
    speakers: list[str]
    vocab_sha256: str = ""

    def parameters(self):
        return self.model.parameters()

    def logits(self, items, training, rng):
        return self.model.logits(make_batch([ex.tokens for ex in items]), training, rng)

    def header(self):
        return {"kind": "rhythm", "config": self.model.config.to_dict(), "speakers": self.speakers,
                "vocab_sha256": self.vocab_sha256}


@dataclass
class FusionTask:
    assembly: FusionAssembly
    xvectors: XVectorTable
    speakers: list[str]
    vocab_sha256: str = ""

    def parameters(self):
        return self.assembly.parameters()

    def logits(self, items, training, rng):
        batch = make_batch([ex.tokens for ex in items])
        return self.assembly.logits(batch, self.xvectors.stack([ex.utt_id for ex in items]), training, rng)

    def header(self):
        a = self.assembly
        return {"kind": "fusion", "config": a.rhythm.config.to_dict(), "speakers": self.speakers,
                "vocab_sha256": self.vocab_sha256, "fuse": a.fuse, "dim_x": self.xvectors.dim,
                "d_proj": a.own["proj_x.weight"].shape[1]}


@dataclass
class BaselineTask:
    head: XVectorBaseline
    xvectors: XVectorTable
    speakers: list[str]

    def parameters(self):
        return self.head.parameters()

    def logits(self, items, training, rng):
        return self.head.logits(self.xvectors.stack([ex.utt_id for ex in items]))

    def header(self):
        return {"kind": "xvector_baseline", "dim_x": self.head.dim, "speakers": self.speakers}


def save_task(path: str | os.PathLike, task: Task) -> None:
    checkpoint.save(path, {k: p.data for k, p in task.parameters().items()}, task.header())


def _tensors(arrays: dict[str, np.ndarray], prefix: str = "") -> dict[str, Tensor]:
    return {k[len(prefix):]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith(prefix)}


def rhythm_model_from_checkpoint(params: dict[str, np.ndarray], header: dict, prefix: str = "") -> RhythmEncoderModel:
    cfg = RhythmEncoderConfig(**header["config"])
    return RhythmEncoderModel(cfg, _tensors(params, prefix))


def load_task(path: str | os.PathLike, xvectors: XVectorTable | None = None) -> Task:
    """Rebuild a trained task from its checkpoint. Fusion and baseline need ``xvectors``."""
    params, header = checkpoint.load(path)
    kind = header["kind"]
    if kind == "rhythm":
        return RhythmTask(rhythm_model_from_checkpoint(params, header), header["speakers"], header["vocab_sha256"])
    if xvectors is None:
        raise ValueError(f"a {kind} checkpoint needs an x-vector table")
    if kind == "fusion":
        rhythm = rhythm_model_from_checkpoint(params, header, "rhythm.")
        assembly = FusionAssembly(rhythm, _tensors(params, "fusion."), header["fuse"])
        return FusionTask(assembly, xvectors, header["speakers"], header["vocab_sha256"])
    if kind == "xvector_baseline":
        return BaselineTask(XVectorBaseline(_tensors(params)), xvectors, header["speakers"])
    raise ValueError(f"unknown checkpoint kind {kind!r}")


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class TrainRun:
    config: TrainConfig
    steps: int = 0
    loss_log: list[tuple[int, int, float, float]] = field(default_factory=list)  # step, epoch, lr, loss
    val_log: list[tuple[int, float]] = field(default_factory=list)  # epoch, balanced accuracy
    best_score: float = -1.0
    best_epoch: int = 0
    stop_reason: str = ""
    optimizer: Adam | None = None
    n_train: int = 0
    n_val: int = 0

    @property
    def losses(self) -> list[float]:
        return [row[3] for row in self.loss_log]

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "epoch", "lr", "loss"])
        for step, epoch, lr, loss in self.loss_log:
            w.writerow([step, epoch, repr(lr), repr(loss)])
        return buf.getvalue()

    def val_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "balanced_accuracy"])
        for epoch, ba in self.val_log:
            w.writerow([epoch, repr(ba)])
        return buf.getvalue()


def evaluate(task: Task, items: Sequence[Example], batch_size: int = 64) -> ConfusionMatrix:
    """Confusion matrix over ``items``, batched in the given order (deterministic)."""
    n = len(task.speakers)
    cm = ConfusionMatrix(np.zeros((n, n), dtype=np.int64))
    with tc.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            pred = predict(task.logits(chunk, False, None).data)
            cm = cm + ConfusionMatrix.from_predictions([ex.label for ex in chunk], pred, n)
    return cm


def train(config: TrainConfig, data: Sequence[Example], task: Task,
          run_dir: str | os.PathLike | None = None) -> TrainRun:
    """Train ``task`` on ``data`` and return the run with the best-validation weights restored.

    ``data`` is split into train/validation internally. When ``run_dir`` is
    given, the config snapshot, loss and validation CSV logs and the best
    checkpoint are written there.
    """
    train_set, val_set = split_train_val(data, config.val_fraction, derive_rng(config.seed, "split"))
    if not train_set or not val_set:
        raise TrainingError("empty training or validation set")
    labels = {ex.label for ex in data}
    if max(labels) >= len(task.speakers):
        raise TrainingError("labels exceed the speaker table")
    if isinstance(task, (FusionTask, BaselineTask)):
        preflight([ex.utt_id for ex in data], task.xvectors)

    shuffle_rng = derive_rng(config.seed, "shuffle")
    dropout_rng = derive_rng(config.seed, "dropout")
    params = task.parameters()
    opt = Adam(params, weight_decay=config.weight_decay)
    run = TrainRun(config, optimizer=opt, n_train=len(train_set), n_val=len(val_set))
    per_epoch = math.ceil(len(train_set) / config.batch_size)
    total = config.epochs * per_epoch
    best: dict[str, np.ndarray] | None = None
    bad = 0
    run.stop_reason = "epochs_exhausted"

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        for b in range(per_epoch):
            items = [train_set[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            if not items:
                raise TrainingError("empty batch")
            lr = cosine_lr(run.steps, total, config.lr0, config.eta_min)
            opt.zero_grad()
            try:
                loss = tc.cross_entropy(task.logits(items, True, dropout_rng), [ex.label for ex in items])
                tc.backward(loss)
                opt.step(lr, config.grad_clip)
            except tc.NonFiniteError as exc:
                raise TrainingError(f"non-finite value at step {run.steps} (epoch {epoch}, batch {b}): {exc}") from exc
            run.loss_log.append((run.steps, epoch, lr, loss.item()))
            run.steps += 1

        score = balanced_accuracy(evaluate(task, val_set, config.eval_batch_size))
        run.val_log.append((epoch, score))
        log.info("epoch %d loss %.4f val_bacc %.4f", epoch, run.loss_log[-1][3], score)
        if score > run.best_score:
            run.best_score, run.best_epoch, bad = score, epoch, 0
            best = {k: p.data.copy() for k, p in params.items()}
        else:
            bad += 1
            if bad >= config.early_stop_patience:
                run.stop_reason = "early_stop"
                break

    for k, p in params.items():
        p.data[...] = best[k]
    if run_dir is not None:
        write_run_dir(run_dir, run, task)
    return run


def write_run_dir(run_dir: str | os.PathLike, run: TrainRun, task: Task) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = asdict(run.config)
    atomic_write_text(run_dir / "config.json", json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    atomic_write_text(run_dir / "loss.csv", run.loss_csv())
    atomic_write_text(run_dir / "val.csv", run.val_csv())
    save_task(run_dir / "best.ckpt", task)
