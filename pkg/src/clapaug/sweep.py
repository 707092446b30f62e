"""Seeded sweeps over the number of pooled prompts or the original-caption probability."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from clapaug.config import ResolvedConfig, load_config
from clapaug.contrastive import TrainConfig, TrainResult, train
from clapaug.data import ToyDataset, ToySpec, generate_toy_dataset
from clapaug.encoders import DualEncoder, ModelConfig
from clapaug.evaluation import eval_multiclass, format_table, to_csv

log = logging.getLogger(__name__)

AXES = ("n_prompts", "p")
FIELDS = ("axis", "axis_value", "seed", "metric", "value")
CONTROL_P = 1.0
METRICS = ("zsac_paraphrase", "zsac_lexicon")


def model_config(cfg: ResolvedConfig, seed: int) -> ModelConfig:
    return ModelConfig(**cfg["model"], seed=seed)


def train_config(cfg: ResolvedConfig, seed: int, p: float | None = None) -> TrainConfig:
    t, a = cfg["train"], cfg["augment"]
    return TrainConfig(batch_size=t["batch_size"], epochs=t["epochs"], steps=t["steps"],
                       learning_rate=t["learning_rate"], seed=seed,
                       p=a["p"] if p is None else p, k=a["k"],
                       checkpoint_every=t["checkpoint_every"])


@dataclass
class ToyRun:
    data: ToyDataset
    model: DualEncoder
    result: TrainResult


def train_toy(seed: int, cfg: ResolvedConfig | None = None, p: float | None = None,
              toy: ToySpec | None = None) -> ToyRun:
    """Generate the toy corpus for ``seed`` and train a fresh model on it."""
    cfg = cfg or load_config()
    toy = toy or ToySpec(seed=seed, feature_dim=cfg["model"]["feature_dim"],
                         vocab_buckets=cfg["model"]["vocab_buckets"])
    data = generate_toy_dataset(toy)
    model = DualEncoder(model_config(cfg, seed))
    result = train(model, data.train, train_config(cfg, seed, p))
    return ToyRun(data, model, result)


def zsac_metrics(run: ToyRun, n_prompts: int, eval_seed: int) -> dict[str, float]:
    """Accuracy with held-out paraphrase prompts and with training-lexicon prompts."""
    ds = run.data
    return {
        "zsac_paraphrase": eval_multiclass(run.model, ds.eval, ds.label_specs, n_prompts, eval_seed),
        "zsac_lexicon": eval_multiclass(run.model, ds.eval, ds.lexicon_label_specs, n_prompts, eval_seed),
    }


def run_sweep(axis: str, values: Sequence[float], seeds: Sequence[int], cfg: ResolvedConfig | None = None,
              control: bool = True, on_row: Callable[[dict], None] | None = None) -> list[dict]:
    """Long-format rows ``(axis, axis_value, seed, metric, value)``.

    ``n_prompts`` trains once per seed and re-scores; ``p`` trains per cell and,
    with ``control``, adds a p=1.0 (no caption augmentation) column.
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    cfg = cfg or load_config()
    eval_seed = cfg["eval"]["seed"]
    values = [int(v) for v in values] if axis == "n_prompts" else [float(v) for v in values]
    if axis == "n_prompts" and min(values) < 1:
        raise ValueError("n_prompts values must be >= 1")
    if axis == "p":
        if not all(0.0 <= v <= 1.0 for v in values):
            raise ValueError("p values must lie in [0, 1]")
        if control and CONTROL_P not in values:
            values = values + [CONTROL_P]

    rows: list[dict] = []

    def emit(value, seed, metrics):
        for name in METRICS:
            row = {"axis": axis, "axis_value": value, "seed": seed, "metric": name, "value": metrics[name]}
            rows.append(row)
            if on_row is not None:
                on_row(row)

    for seed in seeds:
        if axis == "n_prompts":
            run = train_toy(seed, cfg)
            for n in values:
                emit(n, seed, zsac_metrics(run, n, eval_seed + seed))
        else:
            for p in values:
                log.info("sweep p=%s seed=%d", p, seed)
                emit(p, seed, zsac_metrics(train_toy(seed, cfg, p=p), cfg["eval"]["n_prompts"], eval_seed + seed))
    return rows


def cell_stats(rows: Sequence[dict], metric: str) -> dict:
    """``axis_value -> (mean, population std, n)`` in first-seen order."""
    groups: dict = {}
    for r in rows:
        if r["metric"] == metric:
            groups.setdefault(r["axis_value"], []).append(r["value"])
    return {v: (float(np.mean(xs)), float(np.std(xs)), len(xs)) for v, xs in groups.items()}


def peak(rows: Sequence[dict], metric: str, exclude=(CONTROL_P,)) -> float:
    """Swept value with the highest mean; the p=1.0 control is not a candidate."""
    axis = rows[0]["axis"] if rows else None
    stats = cell_stats(rows, metric)
    cands = {v: s for v, s in stats.items() if not (axis == "p" and v in exclude)}
    if not cands:
        raise ValueError(f"no swept cells for metric {metric!r}")
    return max(cands, key=lambda v: cands[v][0])


def sweep_table(rows: Sequence[dict]) -> str:
    """One line per metric, one ``mean ± std`` column per axis value."""
    if not rows:
        return ""
    axis = rows[0]["axis"]
    header_vals = list(dict.fromkeys(r["axis_value"] for r in rows))
    names = [f"{v} (control)" if axis == "p" and v == CONTROL_P else str(v) for v in header_vals]
    table_rows = []
    for metric in dict.fromkeys(r["metric"] for r in rows):
        stats = cell_stats(rows, metric)
        line = {"metric": metric}
        for v, name in zip(header_vals, names):
            m, s, _ = stats[v]
            line[name] = f"{m:.4f} ± {s:.4f}"
        table_rows.append(line)
    return f"{axis}\n" + format_table(table_rows, ["metric"] + names)


def sweep_csv(rows: Sequence[dict]) -> str:
    return to_csv(rows, FIELDS)
