"""Contrastive objective and training loop with caption augmentation."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from clapaug import kernels
from clapaug.checkpoint import save_checkpoint
from clapaug.encoders import DualEncoder
from clapaug.errors import ClapAugError, NonFiniteError, ShapeError
from clapaug.nn import Adam

if TYPE_CHECKING:
    from clapaug.data import SampleRecord

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6
SLOT_TOL = 1e-12


@dataclass
class AugmentationPolicy:
    """Keep the original caption with probability ``p``, else one of ``k`` rewrites."""

    p: float = 0.4
    k: int = 4
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        self.rng = np.random.default_rng(self.seed)

    @property
    def effective_p(self) -> float:
        return 1.0 if self.k == 0 else self.p

    def draw(self) -> float:
        return float(self.rng.random())


def select_caption(sample: "SampleRecord", policy: AugmentationPolicy, u: float) -> str:
    """Pick the original caption or a rewrite for uniform draw ``u`` in [0, 1)."""
    k = policy.k
    if k > 0 and len(sample.rewrites) < k:
        raise ClapAugError(
            f"sample {sample.id!r} has {len(sample.rewrites)} rewrites, policy needs {k}")
    p = policy.effective_p
    if u < p:
        return sample.caption
    # slot boundaries p + j*(1-p)/k belong to the upper slot even when the
    # binary quotient lands a few ulps below the integer
    idx = min(k - 1, math.floor((u - p) * k / (1.0 - p) + SLOT_TOL))
    return sample.rewrites[idx]


@dataclass
class SimilarityMatrix:
    C: np.ndarray
    tau: float

    @property
    def batch_size(self) -> int:
        return self.C.shape[0]


def _check_unit_rows(x: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
    if bad.size:
        raise ShapeError(f"{name} row {int(bad[0])} has norm {norms[bad[0]]:.9f}, expected unit norm")


def similarity_matrix(audio_emb: np.ndarray, text_emb: np.ndarray, tau: float) -> SimilarityMatrix:
    """``C = tau * A @ T.T`` over unit-norm rows."""
    if audio_emb.ndim != 2 or audio_emb.shape != text_emb.shape:
        raise ShapeError(f"embedding shapes differ: {audio_emb.shape} vs {text_emb.shape}")
    _check_unit_rows(audio_emb, "audio embedding")
    _check_unit_rows(text_emb, "text embedding")
    return SimilarityMatrix(tau * (audio_emb @ text_emb.T), tau)


def contrastive_loss(C) -> tuple[float, np.ndarray]:
    """Symmetric InfoNCE: mean of row-wise and column-wise cross-entropy on the diagonal.

    Returns ``(loss, dloss/dC)``.
    """
    if isinstance(C, SimilarityMatrix):
        C = C.C
    C = np.ascontiguousarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise NonFiniteError("similarity matrix has non-finite entries")
    return kernels.contrastive_loss_grad(C)


def loss_and_backward(model: DualEncoder, features: np.ndarray, captions: Sequence[str]) -> float:
    """Forward both encoders, compute the loss, and fill every gradient slot of ``model``."""
    a = model.encode_audio(features)
    t = model.encode_text(list(captions))
    tau = model.temperature
    sim = similarity_matrix(a, t, tau)
    loss, g = contrastive_loss(sim)
    model.backward_audio(tau * (g @ t))
    model.backward_text(tau * (g.T @ a))
    # dC/dlog_tau = C while tau is below its clamp
    model.grad_log_temperature[0, 0] = float(np.sum(g * sim.C))
    return loss


def train_step(model: DualEncoder, batch: Sequence["SampleRecord"], policy: AugmentationPolicy,
               adam: Adam) -> float:
    """One optimizer step on ``batch``; returns the pre-step loss."""
    captions = [select_caption(s, policy, policy.draw()) for s in batch]
    features = np.stack([s.features for s in batch]).astype(np.float64)
    loss = loss_and_backward(model, features, captions)
    adam.step(model.params(), model.grads())
    model.clamp_temperature()
    return loss


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    steps: int | None = None
    learning_rate: float = 5e-4
    seed: int = 0
    p: float = 0.4
    k: int = 4
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainResult:
    model: DualEncoder
    adam: Adam
    history: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled partition of ``range(n)``; a trailing batch of size 1 is dropped."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


HISTORY_FIELDS = ("step", "epoch", "loss", "tau")


def train(model: DualEncoder, dataset: Sequence["SampleRecord"], config: TrainConfig,
          out_dir: Path | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the epoch loop. With ``out_dir``, stream ``loss.csv`` and write checkpoints.

    When ``config.steps`` is set it overrides ``config.epochs``.
    """
    if not dataset:
        raise ClapAugError("training dataset is empty")
    shuffle_seq, aug_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    policy = AugmentationPolicy(p=config.p, k=config.k,
                                seed=int(aug_seq.generate_state(1)[0]))
    adam = Adam(lr=config.learning_rate)
    result = TrainResult(model, adam)

    csv_file = writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        csv_file = open(out_dir / "loss.csv", "w", newline="")
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)

    step = 0
    try:
        epochs = itertools.count() if config.steps is not None else range(config.epochs)
        for epoch in epochs:
            batches = epoch_batches(len(dataset), config.batch_size, shuffle_rng)
            if not batches:
                raise ClapAugError("dataset too small: every batch would have a single sample")
            for idx in batches:
                if config.steps is not None and step >= config.steps:
                    break
                loss = train_step(model, [dataset[i] for i in idx], policy, adam)
                step += 1
                row = {"step": step, "epoch": epoch, "loss": loss, "tau": model.temperature}
                result.history.append(row)
                if writer is not None:
                    writer.writerow([step, epoch, repr(loss), repr(row["tau"])])
                if on_step is not None:
                    on_step(row)
                if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(model, adam, out_dir / "checkpoints" / f"step_{step:06d}.ckpt")
            if config.steps is not None and step >= config.steps:
                break
    finally:
        if csv_file is not None:
            csv_file.close()
    if out_dir is not None:
        save_checkpoint(model, adam, out_dir / "model.ckpt")
    log.info("trained %d steps, final loss %.6f", step, result.history[-1]["loss"] if result.history else float("nan"))
    return result
