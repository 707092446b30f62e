"""Caption rewrites and two-stage prompt pools, from a chat endpoint or an offline template generator."""

from __future__ import annotations

import json
import logging
import re
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from clapaug.data import LabelSpec, Prompt
from clapaug.errors import GenerationError, TokenizeError
from clapaug.llm import ChatClient, ParseError, parse_numbered_list
from clapaug.tokenizer import content_words, words

log = logging.getLogger(__name__)

IN_CONTEXT_SIZE = 5


def normalize(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


@dataclass
class InContextBank:
    pairs: list[tuple[str, str]]
    sample_size: int = IN_CONTEXT_SIZE
    seed: int = 0

    def __post_init__(self):
        if self.sample_size < 1:
            raise ValueError("sample size must be >= 1")
        if len(self.pairs) < self.sample_size:
            raise ValueError(f"bank has {len(self.pairs)} pairs, need at least {self.sample_size}")

    @classmethod
    def load(cls, path=None, sample_size: int = IN_CONTEXT_SIZE, seed: int = 0) -> "InContextBank":
        """Read ``{"original", "rewritten"}`` lines; the packaged bank when ``path`` is None."""
        if path is None:
            text = resources.files("clapaug").joinpath("data/incontext_bank.jsonl").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        pairs = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append((str(rec["original"]), str(rec["rewritten"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"bank line {n}: expected {{original, rewritten}}: {exc}") from exc
        return cls(pairs, sample_size, seed)

    def sample(self, rng: np.random.Generator) -> list[tuple[str, str]]:
        idx = rng.choice(len(self.pairs), size=self.sample_size, replace=False)
        return [self.pairs[i] for i in idx]

    def rng_for(self, key: str, attempt: int) -> np.random.Generator:
        # keyed by input so results do not depend on request scheduling
        return np.random.default_rng([self.seed, zlib.crc32(key.encode("utf-8")), attempt])


class Generator(Protocol):
    def rewrite(self, caption: str, count: int, attempt: int) -> list[str]: ...
    def describe(self, label: str, count: int, attempt: int) -> list[str]: ...
    def scenes(self, label: str, description: str, count: int, attempt: int) -> list[str]: ...


REWRITE_TEMPLATES = (
    "A low, steady rendition of: {c}",
    "Rapid bursts of: {c}",
    "A sharp, bright version of: {c}",
    "Muffled and distant: {c}",
    "Loud and close to the listener: {c}",
    "A soft, fading take on: {c}",
    "Rhythmic and repeating: {c}",
    "A harsh, grating form of: {c}",
)


class FallbackGenerator:
    """Deterministic templates; output depends only on the inputs and ``seed``."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def rewrite(self, caption: str, count: int, attempt: int) -> list[str]:
        out = []
        for j in range(count):
            i = attempt * count + j + self.seed
            text = REWRITE_TEMPLATES[i % len(REWRITE_TEMPLATES)].format(c=caption)
            rnd = i // len(REWRITE_TEMPLATES)
            out.append(text if rnd == 0 else f"{text}, take {rnd + 1}")
        return out

    def describe(self, label: str, count: int, attempt: int) -> list[str]:
        start = attempt * count + self.seed
        return [f"the characteristic sound of {label}, variant {start + j + 1}" for j in range(count)]

    def scenes(self, label: str, description: str, count: int, attempt: int) -> list[str]:
        start = attempt * count + self.seed
        return [f"In scene {start + j + 1}, {description} of a {label} is heard." for j in range(count)]


REWRITE_INSTRUCTION = (
    "You rewrite short audio captions. Keep every sound event of the original, and describe "
    "each one by how it sounds: pitch, loudness, timbre, rhythm or texture. Vary wording and "
    "sentence structure between rewrites. Reply with a numbered list and nothing else."
)
DESCRIBE_INSTRUCTION = (
    "Describe how the given sound category sounds, as short phrases about its acoustic "
    "character (for example pitch, timbre, loudness). Reply with a numbered list and nothing else."
)
SCENE_INSTRUCTION = (
    "Write one-sentence audio captions of scenes where the given sound is heard. Every caption "
    "must include the given description word for word. Reply with a numbered list and nothing else."
)


def rewrite_messages(caption: str, count: int, exemplars: Sequence[tuple[str, str]]) -> list[dict]:
    shots = "\n\n".join(f"Original: {o}\nRewritten: {r}" for o, r in exemplars)
    user = (f"Examples:\n\n{shots}\n\n"
            f"Write {count} different rewrites of this caption.\nCaption: {caption}")
    return [{"role": "system", "content": REWRITE_INSTRUCTION}, {"role": "user", "content": user}]


def describe_messages(label: str, count: int) -> list[dict]:
    user = f"Sound category: {label}\nGive {count} distinct descriptions."
    return [{"role": "system", "content": DESCRIBE_INSTRUCTION}, {"role": "user", "content": user}]


def scene_messages(label: str, description: str, count: int) -> list[dict]:
    user = f"Sound category: {label}\nDescription: {description}\nWrite {count} distinct captions."
    return [{"role": "system", "content": SCENE_INSTRUCTION}, {"role": "user", "content": user}]


class LlmGenerator:
    def __init__(self, client: ChatClient, bank: InContextBank):
        self.client = client
        self.bank = bank

    def rewrite(self, caption: str, count: int, attempt: int) -> list[str]:
        exemplars = self.bank.sample(self.bank.rng_for(caption, attempt))
        return parse_numbered_list(self.client.complete(rewrite_messages(caption, count, exemplars)))

    def describe(self, label: str, count: int, attempt: int) -> list[str]:
        return parse_numbered_list(self.client.complete(describe_messages(label, count)))

    def scenes(self, label: str, description: str, count: int, attempt: int) -> list[str]:
        return parse_numbered_list(self.client.complete(scene_messages(label, description, count)))


def _collect(need: int, produce: Callable[[int, int], list[str]], accept: Callable[[str], bool],
             what: str, exclude: set[str] | None = None) -> list[str]:
    """Gather ``need`` distinct accepted strings, examining at most ``2 * need`` candidates."""
    budget = 2 * need
    seen = set(exclude or ())
    out: list[str] = []
    examined = attempt = 0
    while len(out) < need and examined < budget:
        try:
            candidates = produce(need - len(out), attempt)
        except ParseError as exc:
            log.warning("%s: discarding unparseable response: %s", what, exc)
            candidates = []
        attempt += 1
        if not candidates:
            examined += 1
            continue
        for c in candidates:
            if len(out) == need or examined >= budget:
                break
            examined += 1
            key = normalize(c)
            if not key or key in seen or not _tokenizable(c) or not accept(c):
                continue
            seen.add(key)
            out.append(c.strip())
    if len(out) < need:
        raise GenerationError(f"{what}: only {len(out)} of {need} valid strings within a budget of {budget}")
    return out


def _tokenizable(text: str) -> bool:
    try:
        return bool(words(text))
    except TokenizeError:
        return False


def rewrite_captions(caption: str, k: int, generator: Generator) -> list[str]:
    """``k`` distinct rewrites, each sharing a content token with the original."""
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    original = normalize(caption)
    keep = set(content_words(caption))

    def accept(c: str) -> bool:
        return normalize(c) != original and bool(keep & set(content_words(c)))

    return _collect(k, lambda m, a: generator.rewrite(caption, m, a), accept, f"rewrites of {caption!r}")


def describe_label(label: str, t: int, generator: Generator) -> list[str]:
    if not label or not label.strip():
        raise ValueError("label must be non-empty")
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    return _collect(t, lambda m, a: generator.describe(label, m, a), lambda c: True,
                    f"descriptions of {label!r}")


def mentions(caption: str, description: str) -> bool:
    """Caption holds the description verbatim, or every content token of it."""
    if normalize(description) in normalize(caption):
        return True
    need = set(content_words(description)) or set(words(description))
    return need <= set(words(caption))


def scene_prompts(label: str, description: str, n: int, generator: Generator,
                  exclude: set[str] | None = None) -> list[str]:
    if not label.strip() or not description.strip():
        raise ValueError("label and description must be non-empty")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return _collect(n, lambda m, a: generator.scenes(label, description, m, a),
                    lambda c: mentions(c, description), f"scene prompts for {label!r}", exclude)


def build_label_spec(label: str, t: int, n: int, generator: Generator) -> LabelSpec:
    """``t`` descriptions, then ``n`` scene prompts each; the pool is ``n * t`` distinct prompts."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    descriptions = describe_label(label, t, generator)
    taken: set[str] = set()
    prompts = []
    for i, d in enumerate(descriptions):
        for text in scene_prompts(label, d, n, generator, exclude=taken):
            taken.add(normalize(text))
            prompts.append(Prompt(text, i))
    return LabelSpec(label, descriptions, prompts)
