"""Steering evaluation: interventions, factor sweeps, judges, factor selection, winrates."""

from __future__ import annotations

import csv
import json
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .corpus import SYNTAX, ConceptSpec, make_instruction, stable_hash
from .errors import (
    ConceptSetMismatch,
    EmptySplit,
    InvalidConfig,
    JudgeUnavailable,
    UnparseableRating,
    UnsupportedCombination,
)
from .learners import ConceptSubspace
from .saekit import SaeDictionary, sae_clamp_intervene, sae_min_clamp_intervene
from .toylm import EOS, RESERVED, HookSpec, ToyLM, detokenize, generate_batch

DEFAULT_FACTORS = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.5, 3.0, 4.0, 5.0)
CLAMP_FACTORS = (0.4, 0.8, 1.2, 1.6, 2.0, 3.0, 4.0, 6.0, 8.0, 10.0, 20.0, 40.0, 60.0, 100.0)
FACTOR_PRESETS = {"default": DEFAULT_FACTORS, "clamp": CLAMP_FACTORS}
KINDS = ("addition", "sae_clamp", "sae_min_clamp")
# unsteered reference row prepended to every sweep
REFERENCE_FACTOR = 0.0


def split_instructions(n: int, seed: int, concept_id: str = "") -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Seeded half/half split of instruction indices into (selection, holdout)."""
    if n < 2:
        raise EmptySplit("need at least two instructions to split")
    perm = np.random.default_rng([stable_hash("split", concept_id), seed]).permutation(n)
    half = n // 2
    return tuple(sorted(map(int, perm[:half]))), tuple(sorted(map(int, perm[half:])))


def steering_instructions(spec: ConceptSpec, n: int, seed: int, vocab_size: int) -> list[list[int]]:
    out = []
    for i in range(n):
        rng = np.random.default_rng([stable_hash("steer-instruction", spec.concept_id, i), seed])
        out.append(make_instruction(spec.genre, rng, vocab_size))
    return out


@dataclass
class SteeringPlan:
    concept_id: str
    instructions: list[list[int]]
    selection: tuple[int, ...]
    holdout: tuple[int, ...]
    layer: int
    kind: str = "addition"
    factors: tuple[float, ...] = DEFAULT_FACTORS
    method: str = ""
    subspace: ConceptSubspace | None = None
    sae: SaeDictionary | None = None
    latent: int | None = None

    def __post_init__(self):
        self.factors = tuple(float(f) for f in self.factors)
        if not self.factors:
            raise InvalidConfig("factor grid is empty")
        if any(b <= a for a, b in zip(self.factors, self.factors[1:])):
            raise InvalidConfig("factor grid must be strictly ascending")
        if self.factors[0] <= 0:
            raise InvalidConfig("factors must be positive")
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown intervention kind {self.kind!r}")
        sel, hold = set(self.selection), set(self.holdout)
        if sel & hold or sel | hold != set(range(len(self.instructions))):
            raise InvalidConfig("selection and holdout must partition the instructions")
        has_sae = self.sae is not None and self.latent is not None
        if self.kind != "addition" and not has_sae:
            raise UnsupportedCombination(f"{self.kind} needs an SAE latent")
        if self.subspace is None and not has_sae:
            raise InvalidConfig("plan needs a subspace or an SAE latent")
        if has_sae:
            self.sae.check(self.latent)

    @property
    def direction(self) -> np.ndarray:
        """Addition direction: the subspace vector, or the SAE decoder row."""
        if self.subspace is not None:
            return self.subspace.w
        return self.sae.W_dec[self.latent]

    @property
    def max_activation(self) -> float:
        if self.subspace is not None:
            return float(self.subspace.max_activation or 0.0)
        return float(self.sae.max_activations[self.latent])

    def split_of(self, idx: int) -> str:
        return "selection" if idx in self.selection else "holdout"


def steering_magnitude(factor: float, m: float) -> float:
    """alpha = factor * m (factor 0 is the unsteered reference)."""
    if factor < 0 or m < 0:
        raise ValueError("factor and max activation must be non-negative")
    return float(factor) * float(m)


def _intervene(plan: SteeringPlan, h: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Apply the plan's intervention with per-row magnitudes alpha of shape (B,)."""
    if plan.kind == "addition":
        w = torch.as_tensor(plan.direction, dtype=h.dtype)
        return h + alpha.reshape(-1, *([1] * (h.dim() - 1))) * w
    fn = sae_clamp_intervene if plan.kind == "sae_clamp" else sae_min_clamp_intervene
    target = alpha.numpy().reshape(-1, *([1] * (h.dim() - 2)))
    return torch.from_numpy(fn(plan.sae, plan.latent, h.numpy(), target)).to(h.dtype)


def build_intervention(plan: SteeringPlan, factor: float) -> HookSpec:
    """Hook at the plan's layer for one factor; alpha = factor * m."""
    alpha = steering_magnitude(factor, plan.max_activation)
    if alpha == 0.0 and plan.kind == "addition":
        return HookSpec(plan.layer, lambda h: h)
    a = torch.tensor([alpha], dtype=torch.float64)
    return HookSpec(plan.layer, lambda h: _intervene(plan, h, a.expand(h.shape[0]) if h.dim() > 1 else a))


def batched_intervention(plan: SteeringPlan, factors: Sequence[float]) -> HookSpec:
    """One hook for a batch whose row r is steered with factors[r]."""
    alphas = torch.tensor([steering_magnitude(f, plan.max_activation) for f in factors], dtype=torch.float64)
    zero = alphas == 0.0

    def fn(h):
        out = _intervene(plan, h, alphas)
        # factor-0 rows stay bit-identical to an unhooked run
        return torch.where(zero[:, None, None], h, out)

    return HookSpec(plan.layer, fn)


def sweep_seed(seed: int, concept_id: str, instruction_idx: int, factor_idx: int) -> int:
    ss = np.random.SeedSequence([seed % 2**63, stable_hash(concept_id), instruction_idx, factor_idx])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class Generation:
    method: str
    concept_id: str
    instruction_idx: int
    split: str
    factor: float
    tokens: list[int]


def run_factor_sweep(
    model: ToyLM,
    plan: SteeringPlan,
    max_new: int = 32,
    seed: int = 0,
    include_reference: bool = True,
) -> list[Generation]:
    """One temperature-1 generation per (instruction, factor).

    With `include_reference` an unsteered factor-0 row precedes the grid; its
    factor index is 0 and grid factors are numbered from 1.
    """
    factors = ((REFERENCE_FACTOR,) if include_reference else ()) + plan.factors
    offset = 0 if include_reference else 1
    hook = batched_intervention(plan, factors)
    out = []
    for i, instr in enumerate(plan.instructions):
        seeds = [sweep_seed(seed, plan.concept_id, i, j + offset) for j in range(len(factors))]
        rows = generate_batch(model, instr, len(factors), hook, max_new=max_new, temperature=1.0, seeds=seeds)
        for f, toks in zip(factors, rows):
            out.append(Generation(plan.method, plan.concept_id, i, plan.split_of(i), f, toks))
    return out


# -- judging ----------------------------------------------------------------


def harmonic_overall(c: int, i: int, f: int) -> float:
    for s in (c, i, f):
        if s not in (0, 1, 2):
            raise ValueError(f"subscores must be 0, 1 or 2, got {s!r}")
    if min(c, i, f) == 0:
        return 0.0
    return 3.0 / (1.0 / c + 1.0 / i + 1.0 / f)


@dataclass(frozen=True)
class JudgeScores:
    concept: int
    instruct: int
    fluency: int

    @property
    def overall(self) -> float:
        return harmonic_overall(self.concept, self.instruct, self.fluency)


@dataclass(frozen=True)
class MockJudgeConfig:
    """Thresholds of the deterministic judge. Rates are fractions of generated tokens."""

    concept_high: float = 0.08
    concept_low: float = 0.02
    instruct_high: float = 0.5
    instruct_low: float = 0.2
    zero_run: int = 8  # a run this long means fluency 0
    zero_distinct: float = 0.2  # distinct ratio below this means fluency 0
    fluent_distinct: float = 0.5
    fluent_run: int = 3


def _strip(tokens: Sequence[int]) -> list[int]:
    toks = list(map(int, tokens))
    return toks[: toks.index(EOS)] if EOS in toks else toks


def instruction_keywords(instruction: Sequence[int]) -> set[int]:
    return {int(t) for t in instruction if t not in RESERVED and t not in SYNTAX}


def max_run(tokens: Sequence[int]) -> int:
    best = run = 0
    prev = None
    for t in tokens:
        run = run + 1 if t == prev else 1
        best = max(best, run)
        prev = t
    return best


def mock_judge(
    generation: Sequence[int],
    spec: ConceptSpec,
    instruction: Sequence[int],
    cfg: MockJudgeConfig = MockJudgeConfig(),
) -> JudgeScores:
    toks = _strip(generation)
    if not toks:
        return JudgeScores(0, 0, 0)
    planted = set(spec.planted_tokens)
    rate = sum(t in planted for t in toks) / len(toks)
    concept = 2 if rate >= cfg.concept_high else 1 if rate >= cfg.concept_low else 0

    keys = instruction_keywords(instruction)
    recall = len(keys & set(toks)) / len(keys) if keys else 0.0
    instruct = 2 if recall >= cfg.instruct_high else 1 if recall >= cfg.instruct_low else 0

    distinct = len(set(toks)) / len(toks)
    run = max_run(toks)
    if run >= cfg.zero_run or distinct < cfg.zero_distinct:
        fluency = 0
    elif distinct >= cfg.fluent_distinct and run <= cfg.fluent_run:
        fluency = 2
    else:
        fluency = 1
    return JudgeScores(concept, instruct, fluency)


TEMPLATES = ("concept", "instruct", "fluency")
_RATING = re.compile(r"Rating:\s*\[\[\s*(\d+)\s*\]\]")


def parse_rating(text: str) -> int:
    """Integer from the last "Rating: [[k]]" in `text`; k must be 0, 1 or 2."""
    found = _RATING.findall(text or "")
    if not found:
        raise UnparseableRating(f"no rating in judge response {text[:80]!r}")
    k = int(found[-1])
    if k not in (0, 1, 2):
        raise UnparseableRating(f"rating {k} outside {{0, 1, 2}}")
    return k


def _post_json(endpoint: str, body: dict, timeout: float) -> dict:
    req = urllib.request.Request(
        endpoint,
        data=json.dumps(body).encode(),
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode())


def query_judge(
    endpoint: str,
    template_id: str,
    concept: str,
    instruction: str,
    fragment: str,
    attempts: int = 3,
    backoff: float = 0.5,
    timeout: float = 30.0,
    post: Callable[[str, dict, float], dict] = _post_json,
    sleep: Callable[[float], None] = time.sleep,
) -> int:
    """One subscore from the judge service, retried with exponential backoff."""
    body = {"template_id": template_id, "concept": concept, "instruction": instruction, "fragment": fragment}
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            reply = post(endpoint, body, timeout)
        except (urllib.error.URLError, OSError, ValueError) as exc:
            last = exc
            if attempt + 1 < attempts:
                sleep(backoff * 2**attempt)
            continue
        if not isinstance(reply, dict) or not isinstance(reply.get("text"), str):
            raise UnparseableRating(f"judge reply lacks a text field: {reply!r}")
        return parse_rating(reply["text"])
    raise JudgeUnavailable(f"{endpoint} failed {attempts} times: {last}")


def external_judge(endpoint: str, generation_text: str, concept_text: str, instruction_text: str, **kw) -> JudgeScores:
    c, i, f = (query_judge(endpoint, t, concept_text, instruction_text, generation_text, **kw) for t in TEMPLATES)
    return JudgeScores(c, i, f)


def concept_text(spec: ConceptSpec) -> str:
    return f"{spec.genre} concept built from {detokenize(spec.planted_tokens)}"


@dataclass
class ScoredGeneration:
    method: str
    concept_id: str
    instruction_idx: int
    split: str
    factor: float
    tokens: list[int]
    scores: JudgeScores | None
    error: str = ""

    def to_json(self) -> dict:
        d = {
            "method": self.method,
            "concept_id": self.concept_id,
            "instruction_idx": self.instruction_idx,
            "split": self.split,
            "factor": self.factor,
            "tokens": self.tokens,
            "error": self.error,
        }
        if self.scores is not None:
            d.update(asdict(self.scores), overall=self.scores.overall)
        return d


def judge_generations(
    gens: Sequence[Generation],
    judge: Callable[[Generation], JudgeScores],
    max_concurrent: int = 1,
) -> list[ScoredGeneration]:
    """Score every generation; failed judge calls are recorded, never filled in."""

    def one(g: Generation) -> ScoredGeneration:
        try:
            s, err = judge(g), ""
        except (JudgeUnavailable, UnparseableRating) as exc:
            s, err = None, f"{type(exc).__name__}: {exc}"
        return ScoredGeneration(g.method, g.concept_id, g.instruction_idx, g.split, g.factor, g.tokens, s, err)

    if max_concurrent <= 1:
        return [one(g) for g in gens]
    with ThreadPoolExecutor(max_concurrent) as pool:
        return list(pool.map(one, gens))


# -- selection and aggregation ----------------------------------------------


def _mean_overall(rows: Iterable[ScoredGeneration], split: str, factor: float) -> list[float]:
    return [r.scores.overall for r in rows if r.split == split and r.factor == factor and r.scores is not None]


def select_and_score(rows: Sequence[ScoredGeneration], factors: Sequence[float]) -> tuple[float, float]:
    """Best factor by mean selection-split overall (lowest on ties), scored on holdout."""
    if not factors:
        raise EmptySplit("empty factor grid")
    best, best_score = None, -np.inf
    for f in sorted(factors):
        vals = _mean_overall(rows, "selection", f)
        if not vals:
            continue
        m = float(np.mean(vals))
        if m > best_score:
            best, best_score = f, m
    if best is None:
        raise EmptySplit("no scored selection-split generations")
    hold = _mean_overall(rows, "holdout", best)
    if not hold:
        raise EmptySplit(f"no scored holdout generations at factor {best}")
    return float(best), float(np.mean(hold))


def winrate(method_scores: Mapping[str, float], baseline_scores: Mapping[str, float]) -> float:
    """Percent of concepts where the method beats the baseline, ties counted half.

    Computed so that winrate(A, B) + winrate(B, A) == 100.0 exactly in floats.
    """
    if set(method_scores) != set(baseline_scores):
        raise ConceptSetMismatch("methods were scored on different concepts")
    n = len(method_scores)
    if n == 0:
        raise ConceptSetMismatch("no concepts to compare")
    halves = sum(
        2 if method_scores[c] > baseline_scores[c] else 1 if method_scores[c] == baseline_scores[c] else 0
        for c in method_scores
    )
    # evaluate the smaller side directly and take the complement for the other
    if 2 * halves <= 2 * n:
        return 50.0 * halves / n
    return 100.0 - 50.0 * (2 * n - halves) / n


@dataclass
class SteeringSummary:
    method: str
    concept_id: str
    selected_factor: float
    holdout_overall: float
    by_factor: dict[float, dict[str, float]] = field(default_factory=dict)


def factor_means(rows: Sequence[ScoredGeneration], split: str | None = None) -> dict[float, dict[str, float]]:
    """Mean subscores per factor over scored rows (optionally one split)."""
    out = {}
    for f in sorted({r.factor for r in rows}):
        sel = [r.scores for r in rows if r.factor == f and r.scores is not None and (split is None or r.split == split)]
        if sel:
            out[f] = {
                "concept": float(np.mean([s.concept for s in sel])),
                "instruct": float(np.mean([s.instruct for s in sel])),
                "fluency": float(np.mean([s.fluency for s in sel])),
                "overall": float(np.mean([s.overall for s in sel])),
                "n": len(sel),
            }
    return out


def summarize(rows: Sequence[ScoredGeneration], factors: Sequence[float]) -> list[SteeringSummary]:
    groups: dict[tuple[str, str], list[ScoredGeneration]] = {}
    for r in rows:
        groups.setdefault((r.method, r.concept_id), []).append(r)
    out = []
    for (method, cid), g in sorted(groups.items()):
        f, s = select_and_score(g, factors)
        out.append(SteeringSummary(method, cid, f, s, factor_means(g)))
    return out


def winrate_table(summaries: Sequence[SteeringSummary], baseline: str) -> dict[str, float]:
    by_method: dict[str, dict[str, float]] = {}
    for s in summaries:
        by_method.setdefault(s.method, {})[s.concept_id] = s.holdout_overall
    if baseline not in by_method:
        return {}
    return {m: winrate(v, by_method[baseline]) for m, v in sorted(by_method.items())}


def write_steering_reports(
    rows: Sequence[ScoredGeneration],
    summaries: Sequence[SteeringSummary],
    out_dir: str | Path,
    baseline: str | None = None,
) -> list[Path]:
    """generations.jsonl, steering.csv (per factor), selection.csv and winrate.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r.method, r.concept_id, r.factor, r.instruction_idx))
    paths = [out_dir / "generations.jsonl", out_dir / "steering.csv", out_dir / "selection.csv"]
    with open(paths[0], "w") as f:
        for r in rows:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    with open(paths[1], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "concept", "factor", "c", "i", "f", "overall"])
        for s in summaries:
            for fac, m in sorted(s.by_factor.items()):
                w.writerow([s.method, s.concept_id, repr(fac), repr(m["concept"]), repr(m["instruct"]), repr(m["fluency"]), repr(m["overall"])])
    with open(paths[2], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "concept", "selected_factor", "holdout_overall"])
        for s in summaries:
            w.writerow([s.method, s.concept_id, repr(s.selected_factor), repr(s.holdout_overall)])
    if baseline:
        table = winrate_table(summaries, baseline)
        if table:
            paths.append(out_dir / "winrate.csv")
            with open(paths[-1], "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["method", "baseline", "winrate"])
                for m, v in table.items():
                    w.writerow([m, baseline, repr(v)])
    return paths
