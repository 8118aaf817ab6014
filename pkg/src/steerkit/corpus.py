"""Planted-concept corpora, activation collection and the on-disk dataset format.

Vocabulary layout for a vocab of size V:

* ids 0-3 are reserved (pad, bos, eos, space);
* ids 4-7 are syntax tokens used by the code/math templates (``[ ] + =``);
* the top ``3V/8`` ids form the concept pool. Planted and contrast tokens come
  from it, and background text (instructions, sampled responses) never uses it.

Background responses are sampled from the toy LM itself with the concept pool
banned, so positives and negatives share one background distribution and the
planted pattern is the only systematic difference.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import FormatError, LayerOutOfRange, QuotaInfeasible
from .toylm import BOS, EOS, RESERVED, ToyLM, generate

GENRES = ("text", "code", "math")
LABELS = ("positive", "negative", "hard_negative")
OPEN, CLOSE, PLUS, EQUALS = 4, 5, 6, 7
SYNTAX = (OPEN, CLOSE, PLUS, EQUALS)
# shared-negative genre mixture
NEGATIVE_GENRE_MIX = {"text": 0.70, "code": 0.15, "math": 0.15}

RESPONSE_LEN = (16, 24)
INSTRUCTION_LEN = (6, 10)
# two concept tokens this close form one planted-pattern occurrence
PATTERN_WINDOW = 2


def concept_pool(vocab_size: int) -> range:
    return range(vocab_size - (3 * vocab_size) // 8, vocab_size)


def background_tokens(vocab_size: int) -> range:
    return range(len(RESERVED), concept_pool(vocab_size).start)


def stable_hash(*parts) -> int:
    """Process-independent 32-bit hash (Python's hash() is salted)."""
    return zlib.crc32("\x1f".join(map(str, parts)).encode())


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([stable_hash(*parts[1:]), int(parts[0]) % 2**63])
    )


@dataclass(frozen=True)
class ConceptSpec:
    concept_id: str
    genre: str
    planted_tokens: tuple[int, ...]
    contrast_tokens: tuple[int, ...] = ()
    plant_rate: float = 0.3

    def __post_init__(self):
        if self.genre not in GENRES:
            raise ValueError(f"genre must be one of {GENRES}, got {self.genre!r}")
        if not 0.0 < self.plant_rate <= 1.0:
            raise ValueError("plant_rate must lie in (0, 1]")
        if not self.planted_tokens:
            raise ValueError("planted_tokens must be non-empty")
        if not self.contrast_tokens:
            # same surface ids, different arrangement
            object.__setattr__(self, "contrast_tokens", tuple(self.planted_tokens))
        object.__setattr__(self, "planted_tokens", tuple(int(t) for t in self.planted_tokens))
        object.__setattr__(self, "contrast_tokens", tuple(int(t) for t in self.contrast_tokens))
        bad = set(self.planted_tokens + self.contrast_tokens) & set(RESERVED + SYNTAX)
        if bad:
            raise ValueError(f"planted/contrast tokens overlap reserved ids {sorted(bad)}")

    def to_json(self) -> dict:
        return {
            "concept_id": self.concept_id,
            "genre": self.genre,
            "planted_tokens": list(self.planted_tokens),
            "contrast_tokens": list(self.contrast_tokens),
            "plant_rate": self.plant_rate,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ConceptSpec":
        return cls(
            concept_id=d["concept_id"],
            genre=d["genre"],
            planted_tokens=tuple(d["planted_tokens"]),
            contrast_tokens=tuple(d.get("contrast_tokens", ())),
            plant_rate=float(d.get("plant_rate", 0.3)),
        )


def default_concepts(n: int = 8, vocab_size: int = 64, plant_rate: float = 0.3) -> list[ConceptSpec]:
    """`n` single-token concepts spread over the concept pool, genres cycling."""
    pool = list(concept_pool(vocab_size))
    if n > len(pool):
        raise QuotaInfeasible(f"{n} concepts need {n} pool tokens, pool has {len(pool)}")
    stride = len(pool) // n
    genre_cycle = ("text", "code", "math", "text")
    return [
        ConceptSpec(f"c{i}", genre_cycle[i % 4], (pool[i * stride],), plant_rate=plant_rate)
        for i in range(n)
    ]


@dataclass
class LabeledSequence:
    instruction: list[int]  # starts with BOS
    response: list[int]
    label: str
    concept_id: str

    @property
    def tokens(self) -> list[int]:
        return self.instruction + self.response

    @property
    def y(self) -> int:
        return int(self.label == "positive")

    def to_json(self) -> dict:
        return {
            "concept_id": self.concept_id,
            "label": self.label,
            "instruction": self.instruction,
            "response": self.response,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LabeledSequence":
        if d["label"] not in LABELS:
            raise FormatError(f"unknown label {d['label']!r}")
        return cls(list(d["instruction"]), list(d["response"]), d["label"], d["concept_id"])


@dataclass
class ConceptCorpus:
    spec: ConceptSpec
    train: list[LabeledSequence]
    eval: list[LabeledSequence]


# -- pattern helpers --------------------------------------------------------


def pattern_occurrences(tokens: Sequence[int], concept_tokens: Iterable[int]) -> int:
    """Count pairs of consecutive concept-token hits at most PATTERN_WINDOW apart."""
    cs = set(concept_tokens)
    hits = [i for i, t in enumerate(tokens) if t in cs]
    return sum(1 for a, b in zip(hits, hits[1:]) if b - a <= PATTERN_WINDOW)


def _unit_template(genre: str, rng: np.random.Generator, tokens: Sequence[int]) -> list[int]:
    pick = lambda: int(tokens[rng.integers(len(tokens))])  # noqa: E731
    if genre == "text":
        return [pick(), pick()]
    if genre == "code":
        return [OPEN, pick(), pick(), CLOSE]
    return [pick(), PLUS, pick()]


_UNIT_LEN = {"text": 2, "code": 4, "math": 3}
_PLANTS_PER_UNIT = 2


def plant_response(response: Sequence[int], spec: ConceptSpec, rng: np.random.Generator) -> list[int]:
    """Overwrite aligned slots of `response` with genre-template units."""
    r = list(response)
    n = len(r)
    size = _UNIT_LEN[spec.genre]
    cells = n // size
    if cells < 1:
        raise QuotaInfeasible(f"response of length {n} cannot hold a {spec.genre} unit")
    units = int(round(spec.plant_rate * n / _PLANTS_PER_UNIT))
    units = min(max(units, 1), cells)
    for c in sorted(rng.choice(cells, size=units, replace=False)):
        r[c * size : (c + 1) * size] = _unit_template(spec.genre, rng, spec.planted_tokens)
    return r


def contrast_response(response: Sequence[int], spec: ConceptSpec, rng: np.random.Generator) -> list[int]:
    """Insert one contrast token away from syntax tokens (no planted pattern)."""
    r = list(response)
    ok = [
        i
        for i in range(len(r))
        if all(r[j] not in SYNTAX for j in range(max(0, i - 1), min(len(r), i + 2)))
    ]
    if not ok:
        ok = list(range(len(r)))
    i = ok[rng.integers(len(ok))]
    r[i] = int(spec.contrast_tokens[rng.integers(len(spec.contrast_tokens))])
    return r


def make_instruction(genre: str, rng: np.random.Generator, vocab_size: int) -> list[int]:
    words = np.array([t for t in background_tokens(vocab_size) if t not in SYNTAX])
    n = int(rng.integers(INSTRUCTION_LEN[0], INSTRUCTION_LEN[1] + 1))
    body = [int(t) for t in rng.choice(words, size=n)]
    if genre == "code":
        body[rng.integers(n)] = OPEN
    elif genre == "math":
        body[rng.integers(n)] = PLUS
    return [BOS] + body


def _sample_genre(rng: np.random.Generator) -> str:
    names = list(NEGATIVE_GENRE_MIX)
    return names[int(rng.choice(len(names), p=list(NEGATIVE_GENRE_MIX.values())))]


def sample_background(model: ToyLM, instruction: list[int], rng: np.random.Generator) -> list[int]:
    vocab = model.cfg.vocab_size
    length = int(rng.integers(RESPONSE_LEN[0], RESPONSE_LEN[1] + 1))
    banned = list(concept_pool(vocab)) + [EOS]
    return generate(
        model,
        instruction,
        max_new=length,
        temperature=1.0,
        seed=int(rng.integers(2**63)),
        banned=banned,
    )


def shared_negatives(model: ToyLM, n: int, seed: int, split: str) -> list[LabeledSequence]:
    """Concept-independent negatives: a pure function of (model, n, seed, split)."""
    out = []
    for i in range(n):
        rng = _rng(seed, "negative", split, i)
        instr = make_instruction(_sample_genre(rng), rng, model.cfg.vocab_size)
        out.append(LabeledSequence(instr, sample_background(model, instr, rng), "negative", ""))
    return out


def _check_vocab(spec: ConceptSpec, vocab_size: int) -> None:
    pool = set(concept_pool(vocab_size))
    outside = set(spec.planted_tokens + spec.contrast_tokens) - pool
    if outside:
        raise QuotaInfeasible(
            f"concept {spec.concept_id}: tokens {sorted(outside)} fall outside the concept pool "
            f"[{min(pool)}, {max(pool)}] of a {vocab_size}-token vocabulary"
        )
    if not set(background_tokens(vocab_size)) - set(SYNTAX):
        raise QuotaInfeasible("vocabulary too small to hold background tokens")


def plant_concept_corpus(
    model: ToyLM,
    spec: ConceptSpec,
    n_train: int = 144,
    n_eval: int = 72,
    seed: int = 0,
    hard_fraction: float = 1 / 3,
) -> ConceptCorpus:
    """Train: n/2 positives + n/2 shared negatives. Eval adds hard negatives.

    `hard_fraction` is the share of eval negatives that are hard negatives.
    """
    if n_train % 2 or n_eval % 2:
        raise ValueError("n_train and n_eval must be even")
    _check_vocab(spec, model.cfg.vocab_size)
    vocab = model.cfg.vocab_size

    def positives(split: str, n: int) -> list[LabeledSequence]:
        out = []
        for i in range(n):
            rng = _rng(seed, "positive", spec.concept_id, split, i)
            instr = make_instruction(spec.genre, rng, vocab)
            resp = plant_response(sample_background(model, instr, rng), spec, rng)
            out.append(LabeledSequence(instr, resp, "positive", spec.concept_id))
        return out

    def relabel(seqs):
        return [LabeledSequence(s.instruction, s.response, s.label, spec.concept_id) for s in seqs]

    train = positives("train", n_train // 2) + relabel(shared_negatives(model, n_train // 2, seed, "train"))

    n_neg = n_eval // 2
    n_hard = int(round(hard_fraction * n_neg))
    hard = []
    for i in range(n_hard):
        rng = _rng(seed, "hard", spec.concept_id, i)
        instr = make_instruction(_sample_genre(rng), rng, vocab)
        resp = contrast_response(sample_background(model, instr, rng), spec, rng)
        hard.append(LabeledSequence(instr, resp, "hard_negative", spec.concept_id))
    eval_ = (
        positives("eval", n_eval // 2)
        + relabel(shared_negatives(model, n_neg - n_hard, seed, "eval"))
        + hard
    )
    return ConceptCorpus(spec, train, eval_)


def save_sequences(seqs: Sequence[LabeledSequence], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for s in seqs:
            f.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def load_sequences(path: str | Path) -> list[LabeledSequence]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(LabeledSequence.from_json(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
    return out


# -- activations ------------------------------------------------------------


@dataclass
class ActivationDataset:
    """Token-level hidden vectors for a list of sequences at one layer.

    Rows are float32-representable (they are rounded at collection) so the
    32-bit on-disk format round-trips exactly.
    """

    concept_id: str
    layer: int
    rows: np.ndarray  # (total_tokens, d)
    offsets: np.ndarray  # start row of each sequence
    counts: np.ndarray  # rows per sequence
    labels: list[str]  # per sequence
    tokens: list[list[int]] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if not (len(self.offsets) == len(self.counts) == len(self.labels)):
            raise FormatError("offsets, counts and labels disagree in length")
        expected = np.concatenate([[0], np.cumsum(self.counts)[:-1]]) if len(self.counts) else self.offsets
        if not np.array_equal(self.offsets, expected) or int(self.counts.sum()) != len(self.rows):
            raise FormatError("sequence offsets do not partition the rows")

    @classmethod
    def from_blocks(cls, blocks: Sequence, labels: Sequence[str], concept_id: str = "", layer: int = 1, split: str = "train"):
        blocks = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in blocks]
        counts = np.array([len(b) for b in blocks])
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        return cls(concept_id, layer, np.concatenate(blocks), offsets, counts, list(labels), split=split)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def y(self) -> np.ndarray:
        return np.array([int(lab == "positive") for lab in self.labels])

    @property
    def row_y(self) -> np.ndarray:
        return np.repeat(self.y, self.counts)

    def block(self, i: int) -> np.ndarray:
        return self.rows[self.offsets[i] : self.offsets[i] + self.counts[i]]

    def positive_rows(self) -> np.ndarray:
        return self.rows[self.row_y == 1]

    def negative_rows(self) -> np.ndarray:
        return self.rows[self.row_y == 0]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.rows.astype("<f4").tobytes())
        h.update(self.counts.astype("<i8").tobytes())
        h.update(json.dumps([self.labels, self.tokens, self.layer, self.concept_id]).encode())
        return h.hexdigest()


@torch.no_grad()
def collect_activations(
    model: ToyLM,
    sequences: Sequence[LabeledSequence],
    layer: int,
    concept_id: str = "",
    split: str = "train",
) -> ActivationDataset:
    if not 0 <= layer <= model.cfg.layers:
        raise LayerOutOfRange(f"layer {layer} outside [0, {model.cfg.layers}]")
    if not sequences:
        return ActivationDataset(concept_id, layer, np.zeros((0, model.cfg.dim)), [], [], [], split=split)
    blocks = []
    for s in sequences:
        states = model.run(torch.as_tensor(s.tokens)[None, :], stop_layer=layer)
        blocks.append(states[layer][0].numpy().astype(np.float32).astype(np.float64))
    ds = ActivationDataset.from_blocks(
        blocks,
        [s.label for s in sequences],
        concept_id=concept_id or sequences[0].concept_id,
        layer=layer,
        split=split,
    )
    ds.tokens = [list(s.tokens) for s in sequences]
    return ds


def save_dataset(ds: ActivationDataset, directory: str | Path) -> None:
    """Write `manifest.jsonl` plus `acts.f32` (row-major little-endian float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.jsonl", "w") as f:
        for i, lab in enumerate(ds.labels):
            rec = {
                "concept_id": ds.concept_id,
                "label": lab,
                "layer": ds.layer,
                "split": ds.split,
                "dim": ds.dim,
                "tokens": ds.tokens[i] if ds.tokens else [],
                "row_offset": int(ds.offsets[i]),
                "row_count": int(ds.counts[i]),
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    (directory / "acts.f32").write_bytes(ds.rows.astype("<f4").tobytes())


def load_dataset(directory: str | Path) -> ActivationDataset:
    directory = Path(directory)
    recs = []
    with open(directory / "manifest.jsonl") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    recs.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise FormatError(f"manifest line {lineno}: {e}") from e
    blob = (directory / "acts.f32").read_bytes()
    if not recs:
        if blob:
            raise FormatError(f"empty manifest but blob has {len(blob)} bytes")
        return ActivationDataset("", 0, np.zeros((0, 0)), [], [], [])
    dim = int(recs[0]["dim"])
    counts = [int(r["row_count"]) for r in recs]
    offset = 0
    for i, r in enumerate(recs):
        if int(r["row_offset"]) != offset:
            raise FormatError(f"record {i}: row_offset {r['row_offset']} expected {offset}")
        offset += counts[i]
    expected = 4 * offset * dim
    if len(blob) != expected:
        raise FormatError(
            f"acts.f32 has {len(blob)} bytes but manifest implies {expected} "
            f"({offset} rows x {dim} dims x 4 bytes); mismatch at byte offset {min(len(blob), expected)}"
        )
    rows = np.frombuffer(blob, dtype="<f4").reshape(offset, dim).astype(np.float64)
    ds = ActivationDataset(
        recs[0]["concept_id"],
        int(recs[0]["layer"]),
        rows,
        [int(r["row_offset"]) for r in recs],
        counts,
        [r["label"] for r in recs],
        split=recs[0].get("split", "train"),
    )
    ds.tokens = [list(r["tokens"]) for r in recs]
    return ds
