"""Synthetic parallel corpus with gold per-token labels.

Source sentences are produced by filling label templates with words of the
slot's label.  Every word belongs to exactly one label, so the label is a
deterministic function of the token.  Targets are word-by-word translations
with words of the ``final_labels`` moved to the end (verb-final by default).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass(frozen=True)
class SentenceRecord:
    src: tuple[str, ...]
    tgt: tuple[str, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        if not self.src or not self.tgt:
            raise ValueError("src and tgt must be non-empty")
        if len(self.labels) != len(self.src):
            raise ValueError(f"{len(self.labels)} labels for {len(self.src)} source tokens")


@dataclass
class GrammarConfig:
    labels: list[str]
    words: dict[str, list[str]]
    templates: list[list[str]]
    lexicon: dict[str, str]
    final_labels: list[str] = field(default_factory=lambda: ["V"])
    min_len: int = 4
    max_len: int = 10
    seed: int = 0

    def validate(self) -> None:
        if not self.templates:
            raise ValueError("grammar has no templates")
        owner: dict[str, str] = {}
        for label in self.labels:
            if not self.words.get(label):
                raise ValueError(f"label {label!r} has no words")
            for w in self.words[label]:
                if w in owner and owner[w] != label:
                    raise ValueError(f"word {w!r} listed under both {owner[w]!r} and {label!r}")
                owner[w] = label
                if w not in self.lexicon:
                    raise ValueError(f"word {w!r} has no translation")
        for t in self.templates:
            for slot in t:
                if slot not in self.labels:
                    raise ValueError(f"template slot {slot!r} is not a label")
        if not self.eligible_templates():
            raise ValueError(f"no template length within [{self.min_len}, {self.max_len}]")

    def eligible_templates(self) -> list[list[str]]:
        return [t for t in self.templates if self.min_len <= len(t) <= self.max_len]

    # flat key=value text form
    def dumps(self) -> str:
        lines = [f"labels={','.join(self.labels)}"]
        for label in self.labels:
            lines.append(f"words.{label}={','.join(self.words[label])}")
        lines.append("templates=" + ",".join(" ".join(t) for t in self.templates))
        lines.append("lexicon=" + ",".join(f"{s}:{t}" for s, t in self.lexicon.items()))
        lines.append(f"final_labels={','.join(self.final_labels)}")
        lines.append(f"min_len={self.min_len}")
        lines.append(f"max_len={self.max_len}")
        lines.append(f"seed={self.seed}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "GrammarConfig":
        kv = parse_key_values(text)
        try:
            labels = _split(kv.pop("labels"))
            words = {label: _split(kv.pop(f"words.{label}")) for label in labels}
            templates = [t.split() for t in _split(kv.pop("templates"))]
            lexicon = dict(pair.split(":", 1) for pair in _split(kv.pop("lexicon")))
            cfg = cls(labels=labels, words=words, templates=templates, lexicon=lexicon)
            if "final_labels" in kv:
                cfg.final_labels = _split(kv.pop("final_labels"))
            for key in ("min_len", "max_len", "seed"):
                if key in kv:
                    setattr(cfg, key, int(kv.pop(key)))
        except KeyError as exc:
            raise ValueError(f"grammar missing key {exc.args[0]!r}") from None
        if kv:
            raise ValueError(f"unknown grammar key {sorted(kv)[0]!r}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "GrammarConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def parse_key_values(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


_DEFAULT_TEMPLATES = [
    "DET N V N",
    "DET ADJ N V",
    "DET N V DET N",
    "N V DET ADJ N",
    "DET ADJ N V DET N",
    "DET N V DET ADJ N",
    "DET ADJ ADJ N V DET N",
    "DET ADJ N V DET ADJ N",
    "DET N DET ADJ N V N",
    "DET ADJ N V DET N DET N",
    "DET N DET ADJ N V DET ADJ N",
    "DET ADJ ADJ N V DET ADJ N DET N",
]


def default_grammar(words_per_label: int = 40, seed: int = 0) -> GrammarConfig:
    """Four labels (N, V, ADJ, DET), twelve templates of length 4 to 10."""
    labels = ["N", "V", "ADJ", "DET"]
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    pool = [c1 + v1 + c2 + v2 for c1 in consonants for v1 in vowels for c2 in consonants for v2 in vowels]
    rng = np.random.default_rng(12345)
    picked = rng.choice(len(pool), size=words_per_label * len(labels), replace=False)
    words: dict[str, list[str]] = {}
    for i, label in enumerate(labels):
        chunk = picked[i * words_per_label:(i + 1) * words_per_label]
        words[label] = sorted(pool[j] for j in chunk)
    lexicon = {w: w[::-1].upper() for label in labels for w in words[label]}
    templates = [t.split() for t in _DEFAULT_TEMPLATES]
    return GrammarConfig(labels=labels, words=words, templates=templates, lexicon=lexicon, seed=seed)


def translate(cfg: GrammarConfig, src: Sequence[str], labels: Sequence[str]) -> list[str]:
    front = [cfg.lexicon[w] for w, s in zip(src, labels) if s not in cfg.final_labels]
    back = [cfg.lexicon[w] for w, s in zip(src, labels) if s in cfg.final_labels]
    return front + back


def generate_corpus(cfg: GrammarConfig, n: int, seed: int | None = None) -> list[SentenceRecord]:
    """``n`` records, fully determined by ``seed`` (defaults to ``cfg.seed``)."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not cfg.templates:
        raise ValueError("grammar has no templates")
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    templates = cfg.eligible_templates()
    out = []
    for _ in range(n):
        template = templates[rng.integers(len(templates))]
        src = [cfg.words[slot][rng.integers(len(cfg.words[slot]))] for slot in template]
        out.append(SentenceRecord(tuple(src), tuple(translate(cfg, src, template)), tuple(template)))
    return out


def exact_label_entropy(cfg: GrammarConfig) -> float:
    """Token-level label entropy in nats implied by uniform template choice."""
    counts: Counter = Counter()
    for t in cfg.eligible_templates():
        counts.update(t)
    total = sum(counts.values())
    return -sum(c / total * math.log(c / total) for c in counts.values())


# ------------------------------------------------------------------ vocabulary

class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(RESERVED) + list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    @property
    def n_real(self) -> int:
        return len(self.itos) - len(RESERVED)


def build_vocab(corpus: Sequence[SentenceRecord], side: str) -> Vocabulary:
    """Tokens of one side (``src``, ``tgt`` or ``labels``) by (frequency desc, token asc)."""
    if side not in ("src", "tgt", "labels"):
        raise ValueError(f"unknown side {side!r}")
    counts = Counter(t for rec in corpus for t in getattr(rec, side))
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary([t for t in ordered if t not in RESERVED])


@dataclass
class Vocabs:
    src: Vocabulary
    tgt: Vocabulary
    labels: Vocabulary

    @classmethod
    def from_corpus(cls, corpus: Sequence[SentenceRecord]) -> "Vocabs":
        return cls(build_vocab(corpus, "src"), build_vocab(corpus, "tgt"), build_vocab(corpus, "labels"))


# -------------------------------------------------------------------- batching

@dataclass
class Batch:
    """Padded id matrices.  ``labels`` hold class indices (label id minus the reserved block)."""
    src: np.ndarray
    src_mask: np.ndarray
    labels: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.src.shape[0]


def make_batch(records: Sequence[SentenceRecord], vocabs: Vocabs) -> Batch:
    b = len(records)
    t = max(len(r.src) for r in records)
    u = max(len(r.tgt) for r in records) + 1
    src = np.full((b, t), PAD, dtype=np.int64)
    labels = np.zeros((b, t), dtype=np.int64)
    src_mask = np.zeros((b, t), dtype=bool)
    tgt_in = np.full((b, u), PAD, dtype=np.int64)
    tgt_out = np.full((b, u), PAD, dtype=np.int64)
    tgt_mask = np.zeros((b, u), dtype=bool)
    offset = len(RESERVED)
    for i, rec in enumerate(records):
        n = len(rec.src)
        src[i, :n] = vocabs.src.encode(rec.src)
        src_mask[i, :n] = True
        lab = np.array(vocabs.labels.encode(rec.labels)) - offset
        if (lab < 0).any():
            raise ValueError(f"unknown label in record {i}: {rec.labels}")
        labels[i, :n] = lab
        y = vocabs.tgt.encode(rec.tgt)
        m = len(y) + 1
        tgt_in[i, :m] = [BOS] + y
        tgt_out[i, :m] = y + [EOS]
        tgt_mask[i, :m] = True
    return Batch(src, src_mask, labels, tgt_in, tgt_out, tgt_mask)


def batchify(corpus: Sequence[SentenceRecord], vocabs: Vocabs, batch_size: int,
             order: Sequence[int] | None = None) -> list[Batch]:
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    idx = list(range(len(corpus))) if order is None else list(order)
    return [make_batch([corpus[j] for j in idx[i:i + batch_size]], vocabs)
            for i in range(0, len(idx), batch_size)]


# ------------------------------------------------------------------------- I/O

def write_corpus(path, corpus: Sequence[SentenceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in corpus:
            fh.write(json.dumps({"src": list(rec.src), "tgt": list(rec.tgt), "labels": list(rec.labels)},
                                ensure_ascii=False) + "\n")


def read_corpus(path) -> list[SentenceRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                fields = []
                for key in ("src", "tgt", "labels"):
                    value = obj[key]
                    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                        raise ValueError(f"field {key!r} must be an array of strings")
                    fields.append(tuple(value))
                out.append(SentenceRecord(*fields))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def split_corpus(corpus: Sequence[SentenceRecord], fractions=(0.8, 0.1, 0.1)):
    """Contiguous train/valid/test split; the generator already shuffles."""
    n = len(corpus)
    a = int(round(n * fractions[0]))
    b = a + int(round(n * fractions[1]))
    return list(corpus[:a]), list(corpus[a:b]), list(corpus[b:])
