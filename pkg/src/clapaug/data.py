"""Manifests, label specs, evaluation sets, and the synthetic toy corpus.

Manifest lines::

    {"id": ..., "features": [...] | "features_path": "x.f32", "caption": ..., "rewrites": [...]}

Label-spec lines::

    {"label": ..., "descriptions": [...], "prompts": [{"text": ..., "description_index": i}]}

Evaluation lines carry ``label`` (multi-class) or ``labels`` (multi-label)
instead of captions. Feature files are raw little-endian float32.
"""

from __future__ import annotations

import fcntl
import io
import itertools
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from clapaug.errors import ManifestError, TokenizeError
from clapaug.tokenizer import bucket, tokenize, words

_CORE_KEYS = ("id", "features", "features_path", "caption", "rewrites")


@dataclass
class SampleRecord:
    id: str
    caption: str
    features: np.ndarray | None = None
    rewrites: list[str] = field(default_factory=list)
    features_path: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {"id": self.id}
        if self.features_path is not None:
            d["features_path"] = self.features_path
        else:
            d["features"] = [float(x) for x in np.asarray(self.features, dtype=np.float32)]
        d["caption"] = self.caption
        d["rewrites"] = list(self.rewrites)
        d.update(self.extra)
        return d


@contextmanager
def locked_writer(path):
    """Open ``path`` for text writing under an exclusive advisory lock."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a+", encoding="utf-8", newline="\n") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            f.seek(0)
            f.truncate()
            yield f
            f.flush()
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def _dump_line(obj) -> str:
    return json.dumps(obj, ensure_ascii=False) + "\n"


def _read_lines(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(io.StringIO(text), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: malformed line: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise ManifestError(f"{path}:{lineno}: expected an object")
        yield lineno, obj


def read_feature_file(path) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").astype(np.float32)


def write_feature_file(path, features) -> None:
    np.asarray(features, dtype="<f4").tofile(path)


def _load_features(obj, base: Path, where: str) -> tuple[np.ndarray, str | None]:
    if "features" in obj:
        try:
            feats = np.asarray(obj["features"], dtype=np.float32)
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{where}: features must be a list of numbers") from exc
        if feats.ndim != 1:
            raise ManifestError(f"{where}: features must be a flat list")
        return feats, None
    if "features_path" in obj:
        rel = obj["features_path"]
        try:
            return read_feature_file(base / rel), rel
        except OSError as exc:
            raise ManifestError(f"{where}: cannot read features file {rel!r}: {exc}") from exc
    raise ManifestError(f"{where}: record needs 'features' or 'features_path'")


def load_manifest(path, feature_dim: int | None = None) -> list[SampleRecord]:
    """Read a manifest; errors cite the offending line number."""
    path = Path(path)
    records: list[SampleRecord] = []
    seen: dict[str, int] = {}
    for lineno, obj in _read_lines(path):
        where = f"{path}:{lineno}"
        for key in ("id", "caption"):
            if not isinstance(obj.get(key), str):
                raise ManifestError(f"{where}: missing or non-string {key!r}")
        rid = obj["id"]
        if rid in seen:
            raise ManifestError(f"{where}: duplicate id {rid!r} (first on line {seen[rid]})")
        seen[rid] = lineno
        rewrites = obj.get("rewrites", [])
        if not isinstance(rewrites, list) or not all(isinstance(r, str) for r in rewrites):
            raise ManifestError(f"{where}: rewrites must be a list of strings")
        feats, fpath = _load_features(obj, path.parent, where)
        if feature_dim is None:
            feature_dim = feats.size
        if feats.size != feature_dim:
            raise ManifestError(
                f"{where}: record {rid!r} has {feats.size} features, expected {feature_dim}")
        try:
            tokenize(obj["caption"])
        except TokenizeError as exc:
            raise ManifestError(f"{where}: {exc}") from exc
        extra = {k: v for k, v in obj.items() if k not in _CORE_KEYS}
        records.append(SampleRecord(rid, obj["caption"], feats, list(rewrites), fpath, extra))
    return records


def save_manifest(records, path) -> None:
    ids = set()
    for r in records:
        if r.id in ids:
            raise ManifestError(f"duplicate id {r.id!r}")
        ids.add(r.id)
    with locked_writer(path) as f:
        for r in records:
            f.write(_dump_line(r.to_json()))


@dataclass
class Prompt:
    text: str
    description_index: int


@dataclass
class LabelSpec:
    label: str
    descriptions: list[str]
    prompts: list[Prompt] = field(default_factory=list)

    @property
    def pool(self) -> list[str]:
        return [p.text for p in self.prompts]

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "descriptions": list(self.descriptions),
            "prompts": [{"text": p.text, "description_index": p.description_index} for p in self.prompts],
        }

    @classmethod
    def from_json(cls, obj) -> "LabelSpec":
        return cls(obj["label"], list(obj["descriptions"]),
                   [Prompt(p["text"], int(p["description_index"])) for p in obj["prompts"]])


def save_label_specs(specs, path) -> None:
    with locked_writer(path) as f:
        for s in specs:
            f.write(_dump_line(s.to_json()))


def load_label_specs(path) -> list[LabelSpec]:
    specs = []
    for lineno, obj in _read_lines(path):
        try:
            specs.append(LabelSpec.from_json(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: bad label spec: {exc}") from exc
    return specs


@dataclass
class EvalDataset:
    """Features plus multi-class ``targets`` or a multi-label ``relevance`` matrix."""

    ids: list[str]
    features: np.ndarray
    labels: list[str]
    targets: np.ndarray | None = None
    relevance: np.ndarray | None = None

    def __post_init__(self):
        if (self.targets is None) == (self.relevance is None):
            raise ManifestError("eval dataset needs exactly one of targets / relevance")
        if self.targets is not None and len(self.targets):
            if self.targets.min() < 0 or self.targets.max() >= len(self.labels):
                raise ManifestError("eval target index outside the label range")

    @property
    def multilabel(self) -> bool:
        return self.relevance is not None


def save_eval_dataset(ds: EvalDataset, path) -> None:
    with locked_writer(path) as f:
        for i, rid in enumerate(ds.ids):
            obj = {"id": rid, "features": [float(x) for x in ds.features[i].astype(np.float32)]}
            if ds.multilabel:
                obj["labels"] = [ds.labels[j] for j in np.flatnonzero(ds.relevance[i])]
            else:
                obj["label"] = ds.labels[int(ds.targets[i])]
            f.write(_dump_line(obj))


def load_eval_dataset(path, labels: list[str], feature_dim: int | None = None) -> EvalDataset:
    """Read an evaluation file against an ordered label set."""
    path = Path(path)
    index = {name: i for i, name in enumerate(labels)}
    ids, feats, targets, rel_rows = [], [], [], []
    for lineno, obj in _read_lines(path):
        where = f"{path}:{lineno}"
        f, _ = _load_features(obj, path.parent, where)
        if feature_dim is None:
            feature_dim = f.size
        if f.size != feature_dim:
            raise ManifestError(f"{where}: {f.size} features, expected {feature_dim}")
        ids.append(str(obj.get("id", lineno)))
        feats.append(f)
        names = obj.get("labels")
        if names is None:
            name = obj.get("label")
            if name not in index:
                raise ManifestError(f"{where}: unknown label {name!r}")
            targets.append(index[name])
        else:
            row = np.zeros(len(labels), dtype=bool)
            for name in names:
                if name not in index:
                    raise ManifestError(f"{where}: unknown label {name!r}")
                row[index[name]] = True
            rel_rows.append(row)
    if targets and rel_rows:
        raise ManifestError(f"{path}: mixes single-label and multi-label records")
    features = np.stack(feats) if feats else np.zeros((0, feature_dim or 0), np.float32)
    if rel_rows:
        return EvalDataset(ids, features, list(labels), relevance=np.stack(rel_rows))
    return EvalDataset(ids, features, list(labels), targets=np.asarray(targets, dtype=np.int64))


# -- synthetic toy corpus -----------------------------------------------------

CAPTION_FRAME = "the sound of {a} and {b} with {ctx} in the background"
REWRITE_FRAMES = (
    "a {pa} {pb} texture over distant {ctx}",
    "{a} blending into {pb} while {ctx} continues",
    "{pa} then {b} heard against {ctx}",
    "a {pb} and {pa} mix near {ctx}",
)
PROMPT_FRAMES = (
    "the sound of {d} with {rest}",
    "a clear {d} sound among {rest}",
    "{d} heard nearby with {rest}",
)
TEMPLATE = "The sound of a {label}"

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class ToySpec:
    n_classes: int = 8
    samples_per_class: int = 40
    eval_per_class: int = 10
    feature_dim: int = 64
    sigma: float = 0.1
    lexicon_size: int = 4
    n_contexts: int = 8
    vocab_buckets: int = 32768
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ToyDataset:
    spec: ToySpec
    train: list[SampleRecord]
    eval: EvalDataset
    label_specs: list[LabelSpec]           # paraphrase-lexicon prompt pools
    lexicon_label_specs: list[LabelSpec]   # training-lexicon prompt pools
    labels: list[str]
    lexicons: list[list[str]]
    paraphrases: list[list[str]]
    contexts: list[str]
    class_centers: np.ndarray


def _frame_vocab() -> set[str]:
    text = " ".join((CAPTION_FRAME, TEMPLATE) + REWRITE_FRAMES + PROMPT_FRAMES)
    return {w for w in words(text.replace("{", " ").replace("}", " "))}


def _pseudo_words(rng: np.random.Generator, count: int, vocab_buckets: int) -> list[str]:
    """Distinct three-syllable words whose hash buckets collide with nothing else."""
    reserved = _frame_vocab()
    used_buckets = {bucket(w, vocab_buckets) for w in reserved}
    out: list[str] = []
    while len(out) < count:
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(3))
        b = bucket(w, vocab_buckets)
        if w in reserved or b in used_buckets:
            continue
        reserved.add(w)
        used_buckets.add(b)
        out.append(w)
    return out


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _prompt_spec(label: str, descriptors: list[str]) -> LabelSpec:
    prompts = []
    for i, d in enumerate(descriptors):
        others = [w for w in descriptors if w != d]
        rest = ", ".join(others[:-1]) + " and " + others[-1] if len(others) > 1 else others[0]
        for frame in PROMPT_FRAMES:
            prompts.append(Prompt(frame.format(d=d, rest=rest), i))
    return LabelSpec(label, list(descriptors), prompts)


def check_lexicons(lexicons, paraphrases) -> None:
    seen: set[str] = set()
    for lex, para in zip(lexicons, paraphrases):
        if set(lex) & set(para):
            raise ValueError("paraphrase tokens overlap the training lexicon of a class")
        for w in list(lex) + list(para):
            if w in seen:
                raise ValueError(f"lexicon token {w!r} is not disjoint across classes")
            seen.add(w)


def generate_toy_dataset(spec: ToySpec | None = None) -> ToyDataset:
    """Build a separable toy corpus whose captions are determined by the features.

    Every sample mixes a class center, a direction for each of two class
    descriptor tokens, and a shared background-context direction. Captions name
    the two tokens and the context; rewrites substitute held-out paraphrase
    tokens in other sentence frames.
    """
    spec = spec or ToySpec()
    C, L, F = spec.n_classes, spec.lexicon_size, spec.feature_dim
    if L < 2:
        raise ValueError("lexicon_size must be >= 2")
    if F <= C:
        raise ValueError("feature_dim must exceed n_classes")
    n_combos = L * (L - 1) // 2 * spec.n_contexts
    if spec.samples_per_class > n_combos:
        raise ValueError(f"samples_per_class exceeds the {n_combos} distinct captions per class")
    rng = np.random.default_rng(spec.seed)

    vocab = _pseudo_words(rng, C + 2 * C * L + spec.n_contexts, spec.vocab_buckets)
    labels = vocab[:C]
    lexicons = [vocab[C + c * L: C + (c + 1) * L] for c in range(C)]
    base = C + C * L
    paraphrases = [vocab[base + c * L: base + (c + 1) * L] for c in range(C)]
    contexts = vocab[base + C * L:]
    check_lexicons(lexicons, paraphrases)

    q, _ = np.linalg.qr(rng.normal(size=(F, F)))
    centers = q[:, :C].T.copy()
    complement = q[:, C:]
    token_dirs = _unit(rng.normal(size=(C, L, F - C)) @ complement.T)
    context_dirs = _unit(rng.normal(size=(spec.n_contexts, F - C)) @ complement.T)

    def noise_free(c, a, b, m):
        return _unit(centers[c] + _unit(token_dirs[c, a] + token_dirs[c, b]) + context_dirs[m])

    def featurize(center):
        x = center + rng.normal(0.0, spec.sigma, size=F) if spec.sigma > 0 else center
        return _unit(x).astype(np.float32)

    combos = [(a, b, m) for a, b in itertools.combinations(range(L), 2) for m in range(spec.n_contexts)]
    train: list[SampleRecord] = []
    for c in range(C):
        lex, para = lexicons[c], paraphrases[c]
        for j, ci in enumerate(rng.permutation(len(combos))[:spec.samples_per_class]):
            a, b, m = combos[ci]
            if rng.random() < 0.5:
                a, b = b, a
            fill = dict(a=lex[a], b=lex[b], pa=para[a], pb=para[b], ctx=contexts[m])
            train.append(SampleRecord(
                id=f"toy-{c:02d}-{j:03d}",
                caption=CAPTION_FRAME.format(**fill),
                features=featurize(noise_free(c, a, b, m)),
                rewrites=[f.format(**fill) for f in REWRITE_FRAMES],
                extra={"label": labels[c]},
            ))

    eval_ids, eval_feats, eval_targets = [], [], []
    for c in range(C):
        for j in range(spec.eval_per_class):
            a, b, m = combos[rng.integers(len(combos))]
            eval_ids.append(f"toy-eval-{c:02d}-{j:03d}")
            eval_feats.append(featurize(noise_free(c, a, b, m)))
            eval_targets.append(c)
    eval_set = EvalDataset(eval_ids, np.stack(eval_feats), list(labels),
                           targets=np.asarray(eval_targets, dtype=np.int64))

    return ToyDataset(
        spec=spec,
        train=train,
        eval=eval_set,
        label_specs=[_prompt_spec(labels[c], paraphrases[c]) for c in range(C)],
        lexicon_label_specs=[_prompt_spec(labels[c], lexicons[c]) for c in range(C)],
        labels=list(labels),
        lexicons=lexicons,
        paraphrases=paraphrases,
        contexts=contexts,
        class_centers=centers,
    )
