"""Stage orchestration: gen -> collect -> train -> detect -> steer -> report.

Every stage reads its inputs from the run directory and writes its outputs
there, so any stage can be re-run on its own. All outputs are deterministic
functions of the config; the MANIFEST records a sha256 per artifact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attribution import ClsHead, attribution_token_scores, train_cls_head
from .config import RunConfig
from .corpus import (
    ActivationDataset,
    ConceptSpec,
    collect_activations,
    load_dataset,
    load_sequences,
    plant_concept_corpus,
    save_dataset,
    save_sequences,
    shared_negatives,
)
from .detection import DetectionReport, evaluate_detection, pooled_scores, token_detection_scores, write_reports
from .errors import DegenerateInput, SteerkitError
from .learners import (
    BowClassifier,
    ConceptSubspace,
    fit_bow,
    fit_diffmean,
    fit_lat,
    fit_pca_subspace,
    fit_probe,
    fit_reft_r1,
    fit_ssv,
    load_dictionary,
    save_dictionary,
    with_max_activation,
)
from .numkit import fix_sign, top_principal_component, unit
from .saekit import SaeDictionary, load_sae, plant_sae, save_sae, select_feature_auroc
from .steering import (
    Generation,
    JudgeScores,
    SteeringPlan,
    concept_text,
    external_judge,
    judge_generations,
    mock_judge,
    run_factor_sweep,
    split_instructions,
    steering_instructions,
    summarize,
    write_steering_reports,
)
from .toylm import ToyLM, build_toy_lm, detokenize, load_model, save_model

STAGES = ("gen", "collect", "train", "detect", "steer", "report")
SUBSPACE_METHODS = ("diffmean", "pca", "lat", "probe", "ssv", "reft_r1")
POOL_ID = "_pool"
PREREQS = {"collect": ("gen",), "train": ("collect",), "detect": ("train",), "steer": ("detect",), "report": ("detect",)}


class StageError(SteerkitError):
    def __init__(self, stage: str, concept: str, exc: Exception):
        self.stage, self.concept, self.cause = stage, concept, exc
        where = f"concept {concept}" if concept else "run"
        super().__init__(f"[{stage}] {where}: {type(exc).__name__}: {exc}")


@dataclass
class Layout:
    root: Path

    @property
    def model(self) -> Path:
        return self.root / "model" / "toylm"

    @property
    def concepts(self) -> Path:
        return self.root / "concepts.jsonl"

    def corpus(self, cid: str, split: str) -> Path:
        return self.root / "corpus" / cid / f"{split}.jsonl"

    def acts(self, cid: str, split: str) -> Path:
        return self.root / "acts" / cid / split

    def dictionary(self, method: str) -> Path:
        return self.root / "dict" / method

    @property
    def sae(self) -> Path:
        return self.root / "sae"

    @property
    def detect(self) -> Path:
        return self.root / "detect"

    @property
    def steer(self) -> Path:
        return self.root / "steer"

    @property
    def report(self) -> Path:
        return self.root / "report"


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _guard(stage: str, concept: str, fn: Callable, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except (SteerkitError, ValueError, OSError) as exc:
        raise StageError(stage, concept, exc) from exc


def map_concepts(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Apply `fn` per item, in a spawn-based process pool when jobs > 1; order preserved."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(min(jobs, len(items)), mp_context=mp.get_context("spawn")) as pool:
        return list(pool.map(fn, items))


def load_specs(layout: Layout) -> list[ConceptSpec]:
    return [ConceptSpec.from_json(json.loads(x)) for x in layout.concepts.read_text().splitlines() if x.strip()]


# -- gen ----------------------------------------------------------------------


def stage_gen(cfg: RunConfig, jobs: int = 1) -> None:
    lay = Layout(Path(cfg.out))
    lay.root.mkdir(parents=True, exist_ok=True)
    cfg.save(lay.root / "config.json")
    model = build_toy_lm(cfg.model)
    lay.model.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, lay.model)
    specs = cfg.concept_specs()
    ids = [s.concept_id for s in specs]
    if len(set(ids)) != len(ids) or POOL_ID in ids:
        raise StageError("gen", "", ValueError("concept ids must be unique and not reserved"))
    with open(lay.concepts, "w") as f:
        for s in specs:
            f.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
    for spec in specs:
        cor = _guard(
            "gen", spec.concept_id, plant_concept_corpus, model, spec, cfg.n_train, cfg.n_eval, cfg.seed, cfg.hard_fraction
        )
        for split, seqs in (("train", cor.train), ("eval", cor.eval)):
            lay.corpus(spec.concept_id, split).parent.mkdir(parents=True, exist_ok=True)
            save_sequences(seqs, lay.corpus(spec.concept_id, split))
    pool = shared_negatives(model, cfg.negative_pool, cfg.seed, "pool")
    lay.corpus(POOL_ID, "eval").parent.mkdir(parents=True, exist_ok=True)
    save_sequences(pool, lay.corpus(POOL_ID, "eval"))


# -- collect ------------------------------------------------------------------


def stage_collect(cfg: RunConfig, jobs: int = 1) -> None:
    lay = Layout(Path(cfg.out))
    model = load_model(lay.model)
    targets = [(s.concept_id, sp) for s in load_specs(lay) for sp in ("train", "eval")] + [(POOL_ID, "eval")]
    for cid, split in targets:
        seqs = load_sequences(lay.corpus(cid, split))
        ds = _guard("collect", cid, collect_activations, model, seqs, cfg.layer, cid, split)
        save_dataset(ds, lay.acts(cid, split))


# -- train --------------------------------------------------------------------


@dataclass
class _TrainJob:
    config: dict
    concept_id: str
    method: str


def _fit_one(job: _TrainJob) -> ConceptSubspace:
    cfg = RunConfig.from_json(job.config)
    lay = Layout(Path(cfg.out))
    ds = load_dataset(lay.acts(job.concept_id, "train"))
    m = job.method
    if m == "diffmean":
        return fit_diffmean(ds)
    if m == "pca":
        return fit_pca_subspace(ds)
    if m == "lat":
        return fit_lat(ds, cfg.seed)
    if m == "probe":
        return fit_probe(ds, cfg.train_config("probe"))
    model = load_model(lay.model)
    seqs = load_sequences(lay.corpus(job.concept_id, "train"))
    if m == "ssv":
        return fit_ssv(model, seqs, cfg.layer, cfg.train_config("ssv"))
    if m == "reft_r1":
        return fit_reft_r1(model, seqs, cfg.layer, cfg.train_config("reft_r1"))
    raise ValueError(f"no subspace learner for {m!r}")


def _fit_guarded(job: _TrainJob) -> ConceptSubspace:
    return _guard("train", job.concept_id, _fit_one, job)


def planted_directions(specs: Sequence[ConceptSpec], lay: Layout) -> dict[str, np.ndarray]:
    """Per concept: unit(mean state at planted-token positions of positives - mean negative state)."""
    out = {}
    for spec in specs:
        ds = load_dataset(lay.acts(spec.concept_id, "train"))
        planted = set(spec.planted_tokens)
        hit = [
            ds.offsets[i] + j
            for i, (lab, toks) in enumerate(zip(ds.labels, ds.tokens))
            if lab == "positive"
            for j, t in enumerate(toks)
            if t in planted
        ]
        out[spec.concept_id] = unit(ds.rows[hit].mean(0) - ds.negative_rows().mean(0))
    return out


def stage_train(cfg: RunConfig, jobs: int = 1) -> None:
    lay = Layout(Path(cfg.out))
    specs = load_specs(lay)
    wanted = sorted(set(cfg.methods) | set(cfg.steer_methods))
    for method in [m for m in SUBSPACE_METHODS if m in wanted]:
        jobs_ = [_TrainJob(cfg.to_json(), s.concept_id, method) for s in specs]
        subs = map_concepts(_fit_guarded, jobs_, jobs)
        save_dictionary(subs, lay.dictionary(method))
    if {"sae", "sae_a"} & set(wanted):
        dirs = _guard("train", "", planted_directions, specs, lay)
        ref = np.concatenate([load_dataset(lay.acts(s.concept_id, "train")).rows for s in specs])
        sae, index = _guard("train", "", plant_sae, cfg.seed, cfg.model.dim, cfg.sae_latents, dirs, ref)
        save_sae(sae, lay.sae, index)
        selected = {}
        for s in specs:
            ds = load_dataset(lay.acts(s.concept_id, "train"))
            selected[s.concept_id] = _guard("train", s.concept_id, select_feature_auroc, sae, ds)
        _dump(lay.sae / "sae_a.json", selected)
    if "bow" in wanted:
        for s in specs:
            seqs = load_sequences(lay.corpus(s.concept_id, "train"))
            bow = _guard("train", s.concept_id, fit_bow, seqs, 100.0, cfg.seed)
            _dump(lay.dictionary("bow") / f"{s.concept_id}.json", bow.to_json())
    if {"ig", "ixg"} & set(wanted):
        model = load_model(lay.model)
        for s in specs:
            seqs = load_sequences(lay.corpus(s.concept_id, "train"))
            head = _guard("train", s.concept_id, train_cls_head, model, seqs, cfg.seed)
            _dump(lay.dictionary("cls_head") / f"{s.concept_id}.json", head.to_json())


# -- detect -------------------------------------------------------------------


def _sae_latent_map(lay: Layout, method: str) -> tuple[SaeDictionary, dict[str, int]]:
    sae, index = load_sae(lay.sae)
    if method == "sae_a":
        index = {k: int(v) for k, v in json.loads((lay.sae / "sae_a.json").read_text()).items()}
    return sae, index


def method_subspaces(lay: Layout, method: str) -> dict[str, ConceptSubspace]:
    if method in SUBSPACE_METHODS:
        return {s.concept_id: s for s in load_dictionary(lay.dictionary(method))}
    if method in ("sae", "sae_a"):
        sae, index = _sae_latent_map(lay, method)
        return {cid: sae.latent_subspace(f, cid) for cid, f in index.items()}
    raise ValueError(f"{method} has no linear subspace")


def _token_scores(method: str, cid: str, ds: ActivationDataset, lay: Layout, cfg: RunConfig, subs, model) -> np.ndarray:
    if method == "bow":
        bow = BowClassifier.from_json(json.loads((lay.dictionary("bow") / f"{cid}.json").read_text()))
        texts = [detokenize(t) for t in ds.tokens]
        # one sequence-level probability, repeated over that sequence's rows
        return np.repeat(bow.predict_proba(texts), ds.counts)
    if method in ("ig", "ixg"):
        head = ClsHead.from_json(json.loads((lay.dictionary("cls_head") / f"{cid}.json").read_text()))
        return attribution_token_scores(model, head, ds.tokens, cfg.layer, method, cfg.ig_steps)
    return token_detection_scores(subs[cid], ds)


def stage_detect(cfg: RunConfig, jobs: int = 1) -> list[DetectionReport]:
    lay = Layout(Path(cfg.out))
    specs = load_specs(lay)
    pool = load_dataset(lay.acts(POOL_ID, "eval"))
    model = load_model(lay.model) if {"ig", "ixg"} & set(cfg.methods) else None
    reports, maxima = [], {}
    for method in cfg.methods:
        subs = method_subspaces(lay, method) if method not in ("bow", "ig", "ixg") else None
        for s in specs:
            cid = s.concept_id

            def one():
                ds = load_dataset(lay.acts(cid, "eval"))
                tok = _token_scores(method, cid, ds, lay, cfg, subs, model)
                pool_tok = _token_scores(method, cid, pool, lay, cfg, subs, model)
                return evaluate_detection(
                    tok, ds, method, cfg.pooling, pooled_scores(pool_tok, pool, cfg.pooling), cfg.extra_negatives
                )

            rep = _guard("detect", cid, one)
            reports.append(rep)
            maxima.setdefault(method, {})[cid] = max(rep.max_activation, 0.0)
    lay.detect.mkdir(parents=True, exist_ok=True)
    write_reports(reports, lay.detect / "detection.jsonl", lay.detect / "detection.csv")
    _dump(lay.detect / "max_activations.json", maxima)
    return reports


# -- steer --------------------------------------------------------------------


def build_plans(cfg: RunConfig, lay: Layout, method: str, specs: Sequence[ConceptSpec]) -> list[SteeringPlan]:
    factors = cfg.factors()
    plans = []
    if method in ("sae", "sae_a"):
        sae, index = _sae_latent_map(lay, method)
    else:
        maxima = json.loads((lay.detect / "max_activations.json").read_text())
        if method not in maxima:
            raise StageError("steer", "", ValueError(f"method {method} was not run through detect"))
        subs = method_subspaces(lay, method)
    for s in specs:
        cid = s.concept_id
        instr = steering_instructions(s, cfg.n_instructions, cfg.seed, cfg.model.vocab_size)
        sel, hold = split_instructions(len(instr), cfg.seed, cid)
        common = dict(concept_id=cid, instructions=instr, selection=sel, holdout=hold, layer=cfg.layer, factors=factors, method=method)
        if method in ("sae", "sae_a"):
            plans.append(SteeringPlan(**common, kind=cfg.sae_kind, sae=sae, latent=index[cid]))
        else:
            sub = with_max_activation(subs[cid], maxima[method][cid])
            plans.append(SteeringPlan(**common, subspace=sub))
    return plans


def make_judge(cfg: RunConfig, specs: dict[str, ConceptSpec], instructions: dict[tuple[str, int], list[int]]):
    if cfg.judge_endpoint:

        def judge(g: Generation) -> JudgeScores:
            instr = instructions[(g.concept_id, g.instruction_idx)]
            return external_judge(cfg.judge_endpoint, detokenize(g.tokens), concept_text(specs[g.concept_id]), detokenize(instr))

        return judge, cfg.judge_concurrency

    def judge(g: Generation) -> JudgeScores:
        return mock_judge(g.tokens, specs[g.concept_id], instructions[(g.concept_id, g.instruction_idx)])

    return judge, 1


def stage_steer(cfg: RunConfig, jobs: int = 1):
    lay = Layout(Path(cfg.out))
    specs = load_specs(lay)
    model = load_model(lay.model)
    gens, instructions = [], {}
    for method in cfg.steer_methods:
        for plan in build_plans(cfg, lay, method, specs):
            for i, ins in enumerate(plan.instructions):
                instructions[(plan.concept_id, i)] = ins
            gens += _guard("steer", plan.concept_id, run_factor_sweep, model, plan, cfg.max_new, cfg.seed)
    judge, conc = make_judge(cfg, {s.concept_id: s for s in specs}, instructions)
    rows = judge_generations(gens, judge, conc)
    summaries = _guard("steer", "", summarize, rows, cfg.factors())
    baseline = cfg.winrate_baseline if cfg.winrate_baseline in cfg.steer_methods else None
    write_steering_reports(rows, summaries, lay.steer, baseline)
    return rows, summaries


# -- report -------------------------------------------------------------------


def emit_projection(subspaces: Sequence[ConceptSubspace]) -> list[tuple[str, float, float]]:
    """(concept_id, pc1, pc2) from a centred PCA of the dictionary rows."""
    if len(subspaces) < 2:
        raise DegenerateInput("projection needs at least two subspaces")
    X = np.stack([s.w for s in subspaces])
    Xc = X - X.mean(0)
    v1 = fix_sign(top_principal_component(Xc))
    p1 = Xc @ v1
    R = Xc - np.outer(p1, v1)
    if np.linalg.norm(R) <= 1e-12 * max(1.0, np.linalg.norm(Xc)):
        p2 = np.zeros(len(X))
    else:
        p2 = R @ fix_sign(top_principal_component(R))
    return [(s.concept_id, float(a), float(b)) for s, a, b in zip(subspaces, p1, p2)]


def write_projection(rows, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["concept_id", "pc1", "pc2"])
        for cid, a, b in rows:
            w.writerow([cid, repr(a), repr(b)])


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def stage_report(cfg: RunConfig, jobs: int = 1) -> dict:
    lay = Layout(Path(cfg.out))
    lay.report.mkdir(parents=True, exist_ok=True)
    summary: dict = {"detection": {}, "steering": {}, "winrate": {}}
    if (lay.detect / "detection.csv").exists():
        by: dict[str, list[dict]] = {}
        for r in _read_csv(lay.detect / "detection.csv"):
            by.setdefault(r["method"], []).append(r)
        for m, rs in sorted(by.items()):
            imb = [float(r["f1_imbalanced"]) for r in rs if r["f1_imbalanced"]]
            summary["detection"][m] = {
                "mean_auroc": float(np.mean([float(r["auroc"]) for r in rs])),
                "mean_f1_balanced": float(np.mean([float(r["f1_balanced"]) for r in rs])),
                "mean_f1_imbalanced": float(np.mean(imb)) if imb else None,
            }
    if (lay.steer / "selection.csv").exists():
        by = {}
        for r in _read_csv(lay.steer / "selection.csv"):
            by.setdefault(r["method"], []).append(float(r["holdout_overall"]))
        summary["steering"] = {m: float(np.mean(v)) for m, v in sorted(by.items())}
    if (lay.steer / "winrate.csv").exists():
        summary["winrate"] = {r["method"]: float(r["winrate"]) for r in _read_csv(lay.steer / "winrate.csv")}
    for method in SUBSPACE_METHODS:
        if lay.dictionary(method).exists():
            subs = load_dictionary(lay.dictionary(method))
            if len(subs) >= 2:
                write_projection(emit_projection(subs), lay.report / f"projection_{method}.csv")
    _dump(lay.report / "summary.json", summary)
    lines = ["| method | mean AUROC | mean holdout overall | winrate |", "|---|---|---|---|"]
    for m in sorted(set(summary["detection"]) | set(summary["steering"])):
        a = summary["detection"].get(m, {}).get("mean_auroc")
        s = summary["steering"].get(m)
        w = summary["winrate"].get(m)
        lines.append(
            f"| {m} | {'' if a is None else f'{a:.3f}'} | {'' if s is None else f'{s:.3f}'} | {'' if w is None else f'{w:.1f}%'} |"
        )
    (lay.report / "summary.md").write_text("\n".join(lines) + "\n")
    return summary


# -- manifest and driver ------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(root: Path, stages_done: Sequence[str], complete: bool, error: str = "") -> Path:
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "MANIFEST.json")
    manifest = {
        "complete": complete,
        "stages": [st for st in STAGES if st in stages_done],
        "error": error,
        "artifacts": [
            {"path": p.relative_to(root).as_posix(), "bytes": p.stat().st_size, "sha256": sha256_file(p)} for p in files
        ],
    }
    _dump(root / "MANIFEST.json", manifest)
    return root / "MANIFEST.json"


STAGE_FNS = {
    "gen": stage_gen,
    "collect": stage_collect,
    "train": stage_train,
    "detect": stage_detect,
    "steer": stage_steer,
    "report": stage_report,
}


def run_stages(cfg: RunConfig, stages: Sequence[str], jobs: int = 1) -> None:
    """Run the given stages in order, always leaving a MANIFEST behind."""
    root = Path(cfg.out)
    bad = cfg.unknown_methods()
    if bad:
        raise StageError("config", "", ValueError(f"unknown methods {bad}"))
    done: list[str] = []
    prior = root / "MANIFEST.json"
    if stages and stages[0] != "gen" and prior.exists():
        # stages run one at a time accumulate in the manifest
        done = [st for st in json.loads(prior.read_text()).get("stages", []) if st not in stages]
    try:
        for st in stages:
            if st != "gen" and not (root / "config.json").exists():
                raise StageError(st, "", FileNotFoundError(f"{root} has no config.json; run gen first"))
            missing = [need for need in PREREQS.get(st, ()) if need not in done]
            if missing:
                raise StageError(st, "", RuntimeError(f"stage {st} needs {', '.join(missing)} to have run"))
            try:
                STAGE_FNS[st](cfg, jobs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(st, "", exc) from exc
            done.append(st)
    except Exception as exc:
        if root.exists():
            write_manifest(root, done, False, str(exc))
        raise
    write_manifest(root, done, set(STAGES) <= set(done))


def run_pipeline(cfg: RunConfig, jobs: int = 1) -> None:
    run_stages(cfg, STAGES, jobs)
