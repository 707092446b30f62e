"""Zero-shot classification with pooled prompt embeddings, and ranking metrics."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from clapaug import kernels
from clapaug.data import EvalDataset, LabelSpec
from clapaug.encoders import DualEncoder
from clapaug.errors import DegenerateError, ShapeError

DEFAULT_TEMPLATE = "The sound of a {label}"
_POOL_EPS = 1e-12


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_prompts(spec: LabelSpec, n_prompts: int, seed) -> list[str]:
    """Draw ``n_prompts`` distinct prompts from the label's pool, without replacement."""
    pool = spec.pool
    if n_prompts < 1:
        raise ValueError("n_prompts must be >= 1")
    if n_prompts > len(pool):
        raise ValueError(
            f"label {spec.label!r}: asked for {n_prompts} prompts, pool has {len(pool)}")
    idx = _as_rng(seed).choice(len(pool), size=n_prompts, replace=False)
    return [pool[i] for i in idx]


@dataclass
class LabelEmbedding:
    label: str
    vector: np.ndarray
    prompts: list[str] = field(default_factory=list)
    prompt_embeddings: np.ndarray | None = None


def pool_embeddings(embs: np.ndarray) -> np.ndarray:
    """Mean of unit vectors, renormalized; a mean that is already unit length is kept as is."""
    mean = embs.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < _POOL_EPS:
        raise DegenerateError("prompt embeddings cancel out: pooled mean has zero norm")
    # a mean that is unit length to 1e-12 is returned undivided, so pooling one
    # vector (or copies of one) is an exact identity
    if abs(norm - 1.0) <= 1e-12:
        return mean
    return mean / norm


def pool_label_embedding(model: DualEncoder, prompts: Sequence[str], label: str = "") -> LabelEmbedding:
    if not prompts:
        raise ValueError("pool_label_embedding needs at least one prompt")
    # one prompt per forward pass: matmul bits can depend on batch size
    embs = np.concatenate([model.encode_text([p]) for p in prompts])
    return LabelEmbedding(label, pool_embeddings(embs), list(prompts), embs)


def label_embeddings(model: DualEncoder, specs: Sequence[LabelSpec], n_prompts: int,
                     seed) -> list[LabelEmbedding]:
    """Pooled embedding per label; prompt subsets are drawn once, in label order."""
    rng = _as_rng(seed)
    return [pool_label_embedding(model, sample_prompts(s, n_prompts, rng), s.label) for s in specs]


def template_embeddings(model: DualEncoder, labels: Sequence[str],
                        template: str = DEFAULT_TEMPLATE) -> list[LabelEmbedding]:
    """Single hand-written template per label, the no-prompt-augmentation baseline."""
    out = []
    for name in labels:
        text = template.format(label=name)
        emb = model.encode_text([text])
        out.append(LabelEmbedding(name, emb[0], [text], emb))
    return out


def _label_matrix(labels: Sequence[LabelEmbedding]) -> np.ndarray:
    if not labels:
        raise ValueError("need at least one label")
    return np.stack([l.vector for l in labels])


def score_matrix(audio_emb: np.ndarray, labels: Sequence[LabelEmbedding]) -> np.ndarray:
    L = _label_matrix(labels)
    if audio_emb.ndim != 2 or audio_emb.shape[1] != L.shape[1]:
        raise ShapeError(f"audio embeddings {audio_emb.shape} do not match label dim {L.shape[1]}")
    return audio_emb @ L.T


def predict(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the lowest index on ties."""
    return np.argmax(scores, axis=1)


def classify(audio_emb: np.ndarray, labels: Sequence[LabelEmbedding]) -> list[tuple[str, float]]:
    """Labels ranked by cosine score, descending; ties go to the lower label index."""
    scores = score_matrix(np.asarray(audio_emb, dtype=np.float64).reshape(1, -1), labels)[0]
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [(labels[i].label, float(scores[i])) for i in order]


def accuracy(scores: np.ndarray, targets: np.ndarray) -> float:
    if len(targets) == 0:
        raise ValueError("accuracy over an empty dataset")
    return float(np.mean(predict(scores) == targets))


def eval_multiclass(model: DualEncoder, dataset: EvalDataset, specs: Sequence[LabelSpec],
                    n_prompts: int, seed) -> float:
    """Top-1 accuracy with pooled prompt embeddings."""
    if dataset.targets is None:
        raise ValueError("eval_multiclass needs single-label ground truth")
    _check_label_order(dataset, specs)
    audio = model.encode_audio(dataset.features)
    return accuracy(score_matrix(audio, label_embeddings(model, specs, n_prompts, seed)), dataset.targets)


def eval_template(model: DualEncoder, dataset: EvalDataset, template: str = DEFAULT_TEMPLATE) -> float:
    if dataset.targets is None:
        raise ValueError("eval_template needs single-label ground truth")
    audio = model.encode_audio(dataset.features)
    return accuracy(score_matrix(audio, template_embeddings(model, dataset.labels, template)), dataset.targets)


def _check_label_order(dataset: EvalDataset, specs: Sequence[LabelSpec]) -> None:
    names = [s.label for s in specs]
    if names != list(dataset.labels):
        raise ValueError("label specs and evaluation labels differ in content or order")


def eval_multilabel_map(scores: np.ndarray, relevance: np.ndarray) -> float:
    """Macro mAP over labels; labels without positives are skipped with a warning."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    relevance = np.asarray(relevance)
    if scores.shape != relevance.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} and relevance {relevance.shape} must match")
    has_pos = relevance.astype(bool).any(axis=0)
    if not has_pos.all():
        skipped = np.flatnonzero(~has_pos).tolist()
        warnings.warn(f"labels {skipped} have no positives and are excluded from mAP", stacklevel=2)
    if not has_pos.any():
        raise ValueError("no label has a positive item")
    ap = kernels.average_precision(scores[:, has_pos], relevance[:, has_pos])
    return float(np.mean(ap))


def eval_retrieval(sim: np.ndarray, ks: Sequence[int]) -> dict[str, dict[int, float]]:
    """Recall@k in both directions for a square audio x text matrix with pairs on the diagonal."""
    sim = np.ascontiguousarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"retrieval matrix must be square, got {sim.shape}")
    n = sim.shape[0]
    for k in ks:
        if not 1 <= k <= n:
            raise ValueError(f"k={k} outside [1, {n}]")
    a2t = kernels.diagonal_ranks(sim)
    t2a = kernels.diagonal_ranks(np.ascontiguousarray(sim.T))
    return {
        "audio_to_text": {k: float(np.mean(a2t < k)) for k in ks},
        "text_to_audio": {k: float(np.mean(t2a < k)) for k in ks},
    }


def retrieval_matrix(model: DualEncoder, features: np.ndarray, captions: Sequence[str]) -> np.ndarray:
    return model.encode_audio(features) @ model.encode_text(list(captions)).T


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Aligned plain-text table."""
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
