"""Supervised rank-1 concept directions, the BoW baseline and affine transport.

Every learner returns a `ConceptSubspace`. Except for SSV, the direction is
unit-norm. Gradient-trained learners expose their loss as a `LossGraph` so the
same objective can be checked against finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import ActivationDataset, LabeledSequence
from .errors import (
    DegenerateDirection,
    DegenerateInput,
    EmptyPositives,
    FormatError,
    MissingClass,
    PairCountMismatch,
)
from .numkit import (
    AdamState,
    LossGraph,
    adam_step,
    backward_gradients,
    fix_sign,
    random_unit,
    top_principal_component,
    unit,
)
from .toylm import ToyLM, detokenize, pad_batch

DEGENERATE_NORM = 1e-8
ACTIVATIONS = ("identity", "relu", "jumprelu")


@dataclass
class ConceptSubspace:
    w: np.ndarray
    method: str
    concept_id: str = ""
    unit_norm: bool = True
    activation: str = "identity"
    threshold: float = 0.0  # jumprelu only
    bias: float = 0.0  # jumprelu only
    max_activation: float | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.unit_norm and abs(np.linalg.norm(self.w) - 1.0) > 1e-10:
            raise DegenerateDirection(f"{self.method}: ||w|| = {np.linalg.norm(self.w)} but unit_norm is set")

    def scores(self, rows: np.ndarray) -> np.ndarray:
        x = np.asarray(rows, dtype=np.float64) @ self.w
        if self.activation == "relu":
            return np.maximum(x, 0.0)
        if self.activation == "jumprelu":
            x = x + self.bias
            return np.where(x > self.threshold, x, 0.0)
        return x


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 6
    lr: float = 1e-2
    weight_decay: float = 0.0
    l1: float = 5e-3  # lambda on non-top-k latents
    k: int = 4
    seed: int = 0
    restarts: int = 1  # ReFT-r1 keeps the restart with the lowest training loss

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.k < 1 or self.restarts < 1:
            raise ValueError(f"invalid training config {self}")
        if self.l1 < 0 or self.weight_decay < 0:
            raise ValueError("l1 and weight_decay must be non-negative")


# desk-scale defaults, picked on the planted corpus
PROBE_DEFAULTS = TrainConfig(epochs=24, batch_size=48, lr=5e-2, weight_decay=1e-3)
SSV_DEFAULTS = TrainConfig(epochs=3, batch_size=6, lr=1e-2)
REFT_DEFAULTS = TrainConfig(epochs=6, batch_size=6, lr=2e-2, l1=5e-3, k=4, restarts=4)


def _require_classes(ds: ActivationDataset) -> None:
    y = ds.y
    if not (y == 1).any() or not (y == 0).any():
        raise MissingClass(f"{ds.concept_id or 'dataset'} needs both positive and negative sequences")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


# -- closed-form directions -------------------------------------------------


def fit_diffmean(ds: ActivationDataset) -> ConceptSubspace:
    _require_classes(ds)
    diff = ds.positive_rows().mean(0) - ds.negative_rows().mean(0)
    n = np.linalg.norm(diff)
    if n < DEGENERATE_NORM:
        raise DegenerateDirection(f"class means differ by {n:.3g}")
    return ConceptSubspace(diff / n, "diffmean", ds.concept_id)


def fit_pca_subspace(ds: ActivationDataset) -> ConceptSubspace:
    pos = ds.positive_rows()
    if len(pos) < 2:
        raise DegenerateInput("PCA needs at least two positive rows")
    centered = pos - pos.mean(0)
    if np.abs(centered).max() == 0.0:
        raise DegenerateInput("positive rows have zero variance")
    return ConceptSubspace(top_principal_component(centered), "pca", ds.concept_id)


def fit_lat(ds: ActivationDataset, seed: int = 0) -> ConceptSubspace:
    """Top principal component of unit-normalised differences of random row pairs."""
    H = ds.rows
    if len(H) < 4:
        raise DegenerateInput("LAT needs at least four rows")
    order = np.random.default_rng(seed).permutation(len(H))
    if len(order) % 2:
        # drop the lowest-index row so pairing is total
        order = order[order != order.min()]
    a, b = H[order[0::2]], H[order[1::2]]
    diff = a - b
    norms = np.linalg.norm(diff, axis=1)
    keep = norms > 0
    if not keep.any():
        raise DegenerateInput("all pairwise differences are zero")
    delta = diff[keep] / norms[keep, None]
    if len(delta) < 2:
        # a single difference is its own principal direction
        return ConceptSubspace(fix_sign(delta[0]), "lat", ds.concept_id)
    return ConceptSubspace(top_principal_component(delta), "lat", ds.concept_id)


# -- probe ------------------------------------------------------------------


def probe_loss_graph(ds: ActivationDataset, w: torch.Tensor, seq_idx: Sequence[int] | None = None) -> LossGraph:
    """Token-level BCE of sigmoid(h . w) against inherited sequence labels."""
    idx = range(len(ds.labels)) if seq_idx is None else seq_idx
    H = torch.from_numpy(np.concatenate([ds.block(i) for i in idx]))
    y = torch.from_numpy(np.repeat(ds.y[list(idx)], ds.counts[list(idx)]).astype(np.float64))

    def fn(params):
        return F.binary_cross_entropy_with_logits(H @ params[0], y)

    return LossGraph(fn, [w])


def _train_unit_direction(w, cfg, n_items, make_graph):
    """Adam with parallel-gradient removal and renormalisation after each step."""
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(n_items / cfg.batch_size)
    state = AdamState(lr=cfg.lr, total_steps=cfg.epochs * steps_per_epoch, weight_decay=cfg.weight_decay)
    for _ in range(cfg.epochs):
        for batch in _batches(n_items, cfg.batch_size, rng):
            (g,) = backward_gradients(make_graph(w, batch))
            (w,) = adam_step(state, [w], [g], projection=w)
            w = unit(w)
    return w


def fit_probe(ds: ActivationDataset, cfg: TrainConfig = PROBE_DEFAULTS) -> ConceptSubspace:
    _require_classes(ds)
    w = random_unit(ds.dim, cfg.seed)
    w = _train_unit_direction(w, cfg, len(ds.labels), lambda w, b: probe_loss_graph(ds, w, b))
    return ConceptSubspace(w.numpy(), "probe", ds.concept_id)


# -- LM-loss learners -------------------------------------------------------


@dataclass
class LMBatchData:
    """Frozen hook-layer states for a set of sequences, right-padded."""

    tokens: torch.Tensor  # (B, T)
    valid: torch.Tensor  # (B, T) bool
    lm_mask: torch.Tensor  # (B, T) bool, response positions of positive rows
    hidden: torch.Tensor  # (B, T, d) residual after block `layer`
    layer: int

    def subset(self, idx) -> "LMBatchData":
        idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        T = int(self.valid[idx].sum(1).max())
        return LMBatchData(
            self.tokens[idx, :T], self.valid[idx, :T], self.lm_mask[idx, :T], self.hidden[idx, :T], self.layer
        )


@torch.no_grad()
def prepare_lm_data(model: ToyLM, seqs: Sequence[LabeledSequence], layer: int) -> LMBatchData:
    tokens, valid = pad_batch([s.tokens for s in seqs])
    lm_mask = torch.zeros_like(valid)
    for i, s in enumerate(seqs):
        if s.label == "positive":
            lm_mask[i, len(s.instruction) : len(s.tokens)] = True
    hidden = model.run(tokens, stop_layer=layer)[layer]
    return LMBatchData(tokens, valid, lm_mask, hidden, layer)


def _nll_from_layer(model: ToyLM, data: LMBatchData, h: torch.Tensor) -> torch.Tensor:
    mask = data.lm_mask[:, 1:]
    if not mask.any():
        return h.sum() * 0.0
    states = model.run(data.tokens, start_layer=data.layer, start_hidden=h)
    logits = model.logits(states[-1])[:, :-1]
    logp = torch.log_softmax(logits, dim=-1).gather(-1, data.tokens[:, 1:, None])[..., 0]
    m = mask.to(logp.dtype)
    return -(logp * m).sum() / m.sum()


def ssv_loss_graph(model: ToyLM, data: LMBatchData, w: torch.Tensor) -> LossGraph:
    """Response NLL with w added to every position of the hook layer."""

    def fn(params):
        return _nll_from_layer(model, data, data.hidden + params[0])

    return LossGraph(fn, [w])


def reft_latents(h: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return torch.relu(h @ w)


def reft_gate_and_l1(h: torch.Tensor, valid: torch.Tensor, w: torch.Tensor, k: int):
    """Per-sequence gate (1/k)*sum(top-k latents) and sum of non-top-k latents."""
    a = reft_latents(h, w) * valid
    kk = min(k, a.shape[1])
    # padding never enters the top-k: valid latents are >= 0 > -1
    top, idx = a.masked_fill(~valid, -1.0).topk(kk, dim=1)
    gate = top.clamp(min=0.0).sum(1) / k
    rest = a.scatter(1, idx, 0.0)
    return gate, rest.sum(1)


def reft_loss_graph(model: ToyLM, data: LMBatchData, w: torch.Tensor, k: int, l1: float) -> LossGraph:
    def fn(params):
        w = params[0]
        gate, rest = reft_gate_and_l1(data.hidden, data.valid, w, k)
        h = data.hidden + gate[:, None, None] * w
        return _nll_from_layer(model, data, h) + l1 * rest.mean()

    return LossGraph(fn, [w])


def fit_ssv(model: ToyLM, corpus: Sequence[LabeledSequence], layer: int, cfg: TrainConfig = SSV_DEFAULTS) -> ConceptSubspace:
    pos = [s for s in corpus if s.label == "positive"]
    if not pos:
        raise EmptyPositives("SSV needs positive sequences")
    data = prepare_lm_data(model, pos, layer)
    w = torch.zeros(model.cfg.dim)
    rng = np.random.default_rng(cfg.seed)
    steps = cfg.epochs * math.ceil(len(pos) / cfg.batch_size)
    state = AdamState(lr=cfg.lr, total_steps=steps, weight_decay=cfg.weight_decay)
    for _ in range(cfg.epochs):
        for batch in _batches(len(pos), cfg.batch_size, rng):
            (g,) = backward_gradients(ssv_loss_graph(model, data.subset(batch), w))
            (w,) = adam_step(state, [w], [g])
    return ConceptSubspace(w.numpy(), "ssv", pos[0].concept_id, unit_norm=False, activation="relu")


def fit_reft_r1(model: ToyLM, corpus: Sequence[LabeledSequence], layer: int, cfg: TrainConfig = REFT_DEFAULTS) -> ConceptSubspace:
    labels = {s.label for s in corpus}
    if "positive" not in labels or not labels - {"positive"}:
        raise MissingClass("ReFT-r1 needs positive and negative sequences")
    data = prepare_lm_data(model, corpus, layer)
    best, best_loss = None, math.inf
    for r in range(cfg.restarts):
        w = random_unit(model.cfg.dim, cfg.seed + r)
        # start with live latents: orient w so the mean projection is positive
        if float((data.hidden[data.valid] @ w).mean()) < 0:
            w = -w
        w = _train_unit_direction(
            w, replace(cfg, seed=cfg.seed + r), len(corpus), lambda w, b: reft_loss_graph(model, data.subset(b), w, cfg.k, cfg.l1)
        )
        with torch.no_grad():
            loss = float(reft_loss_graph(model, data, w, cfg.k, cfg.l1).evaluate())
        if loss < best_loss:
            best, best_loss = w, loss
    w = best
    return ConceptSubspace(w.numpy(), "reft_r1", corpus[0].concept_id, activation="relu")


# -- bag of words -----------------------------------------------------------


@dataclass
class BowClassifier:
    vocabulary: dict[str, int]
    weights: np.ndarray
    bias: float
    C: float

    def featurize(self, texts: Sequence[str]) -> np.ndarray:
        X = np.zeros((len(texts), len(self.vocabulary)))
        for i, t in enumerate(texts):
            for word in t.split():
                j = self.vocabulary.get(word)
                if j is not None:
                    X[i, j] += 1.0
        return X

    def decision(self, texts: Sequence[str]) -> np.ndarray:
        return self.featurize(texts) @ self.weights + self.bias

    def predict_proba(self, texts: Sequence[str]) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision(texts)))

    def to_json(self) -> dict:
        return {"vocabulary": self.vocabulary, "weights": self.weights.tolist(), "bias": self.bias, "C": self.C}

    @classmethod
    def from_json(cls, d: dict) -> "BowClassifier":
        return cls(dict(d["vocabulary"]), np.asarray(d["weights"], dtype=np.float64), float(d["bias"]), float(d["C"]))


def _bow_objective(theta, X, y, C):
    z = X @ theta[:-1] + theta[-1]
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + theta[:-1] @ theta[:-1] / (2.0 * C * len(y))
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    r = (p - y) / len(y)
    grad = np.concatenate([X.T @ r + theta[:-1] / (C * len(y)), [r.sum()]])
    return loss, grad, p


def fit_bow(corpus: Sequence[LabeledSequence] | Sequence[tuple[str, int]], C: float = 100.0, seed: int = 0, tol: float = 1e-8, max_iter: int = 500) -> BowClassifier:
    """Whitespace count features + L2 logistic regression (intercept unpenalised).

    Objective: mean log-loss + ||w||^2 / (2 C n). Solved with damped Newton
    steps (full batch) until the gradient norm drops below `tol`.
    """
    if corpus and isinstance(corpus[0], LabeledSequence):
        texts = [detokenize(s.tokens) for s in corpus]
        y = np.array([s.y for s in corpus], dtype=np.float64)
    else:
        texts = [t for t, _ in corpus]
        y = np.array([lab for _, lab in corpus], dtype=np.float64)
    if not (y == 1).any() or not (y == 0).any():
        raise MissingClass("BoW needs both classes")
    if C <= 0:
        raise ValueError("C must be positive")
    del seed  # full-batch solve from zero is deterministic
    vocab: dict[str, int] = {}
    for t in texts:
        for word in t.split():
            vocab.setdefault(word, len(vocab))
    clf = BowClassifier(vocab, np.zeros(len(vocab)), 0.0, C)
    X = clf.featurize(texts)
    n, p = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    reg = np.full(p + 1, 1.0 / (C * n))
    reg[-1] = 0.0
    theta = np.zeros(p + 1)
    loss, grad, prob = _bow_objective(theta, X, y, C)
    for _ in range(max_iter):
        if np.linalg.norm(grad) < tol:
            break
        s = prob * (1 - prob) / n
        Hm = (Xb * s[:, None]).T @ Xb + np.diag(reg) + 1e-12 * np.eye(p + 1)
        step = np.linalg.solve(Hm, grad)
        t = 1.0
        while True:
            new = theta - t * step
            nl, ng, np_ = _bow_objective(new, X, y, C)
            if nl <= loss - 1e-4 * t * grad @ step or t < 1e-10:
                break
            t *= 0.5
        theta, loss, grad, prob = new, nl, ng, np_
    clf.weights = theta[:-1]
    clf.bias = float(theta[-1])
    return clf


# -- affine transport -------------------------------------------------------


@dataclass
class AffineMap:
    A: np.ndarray  # (d_target, d_source)
    b: np.ndarray  # (d_target,)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v) @ self.A.T + self.b


def transport_loss(A: torch.Tensor, b: torch.Tensor, S: torch.Tensor, U: torch.Tensor) -> torch.Tensor:
    """Mean over pairs of 0.5 * squared error + 0.5 * cosine distance."""
    pred = S @ A.T + b
    mse = 0.5 * ((pred - U) ** 2).sum(1)
    cos = F.cosine_similarity(pred, U, dim=1, eps=1e-12)
    return (mse + 0.5 * (1.0 - cos)).mean()


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], ConceptSubspace):
        return np.stack([s.w for s in x])
    return np.asarray(x, dtype=np.float64)


def fit_affine_transport(
    source,
    target,
    lr: float = 1e-2,
    max_steps: int = 5000,
    grad_tol: float = 1e-6,
    seed: int = 0,
) -> AffineMap:
    """Learn u ~ A v + b over paired rows (or ConceptSubspaces paired by concept id)."""
    if (
        isinstance(source, (list, tuple))
        and source
        and isinstance(source[0], ConceptSubspace)
        and isinstance(target, (list, tuple))
        and target
        and isinstance(target[0], ConceptSubspace)
    ):
        tmap = {t.concept_id: t for t in target}
        if len(tmap) != len(source) or any(s.concept_id not in tmap for s in source):
            raise PairCountMismatch("source and target concept ids do not pair up")
        target = [tmap[s.concept_id] for s in source]
    S = torch.from_numpy(_as_matrix(source))
    U = torch.from_numpy(_as_matrix(target))
    if len(S) != len(U):
        raise PairCountMismatch(f"{len(S)} source vs {len(U)} target vectors")
    ds, dt = S.shape[1], U.shape[1]
    g = torch.Generator().manual_seed(seed)
    A = torch.eye(dt, ds) if ds == dt else torch.randn(dt, ds, generator=g) / math.sqrt(ds)
    b = torch.zeros(dt)
    state = AdamState(lr=lr, total_steps=max_steps)
    for _ in range(max_steps):
        gA, gb = backward_gradients(LossGraph(lambda p: transport_loss(p[0], p[1], S, U), [A, b]))
        if math.sqrt(float((gA**2).sum() + (gb**2).sum())) < grad_tol:
            break
        A, b = adam_step(state, [A, b], [gA, gb])
    return AffineMap(A.numpy(), b.numpy())


# -- dictionary files -------------------------------------------------------


def save_dictionary(subspaces: Sequence[ConceptSubspace], directory: str | Path) -> None:
    """Write `header.json` plus `w.f32` (count x d little-endian float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not subspaces:
        raise ValueError("empty dictionary")
    d = len(subspaces[0].w)
    methods = sorted({s.method for s in subspaces})
    header = {
        "format": "steerkit-dictionary-v1",
        "d": d,
        "count": len(subspaces),
        "method": methods[0] if len(methods) == 1 else "mixed",
        "activation": subspaces[0].activation,
        "concepts": [
            {
                "concept_id": s.concept_id,
                "method": s.method,
                "unit_norm": s.unit_norm,
                "activation": s.activation,
                "threshold": s.threshold,
                "bias": s.bias,
                "max_activation": s.max_activation,
            }
            for s in subspaces
        ],
    }
    (directory / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    (directory / "w.f32").write_bytes(np.stack([s.w for s in subspaces]).astype("<f4").tobytes())


def load_dictionary(directory: str | Path) -> list[ConceptSubspace]:
    directory = Path(directory)
    try:
        header = json.loads((directory / "header.json").read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"header.json: {e}") from e
    d, count = int(header["d"]), int(header["count"])
    blob = (directory / "w.f32").read_bytes()
    if len(blob) != 4 * d * count:
        raise FormatError(f"w.f32 has {len(blob)} bytes, expected {4 * d * count}")
    W = np.frombuffer(blob, dtype="<f4").reshape(count, d).astype(np.float64)
    out = []
    for row, meta in zip(W, header["concepts"]):
        unit_norm = bool(meta["unit_norm"])
        if unit_norm:
            # float32 storage; restore the exact unit norm
            row = row / np.linalg.norm(row)
        out.append(
            ConceptSubspace(
                row,
                meta["method"],
                meta["concept_id"],
                unit_norm=unit_norm,
                activation=meta["activation"],
                threshold=float(meta.get("threshold", 0.0)),
                bias=float(meta.get("bias", 0.0)),
                max_activation=meta.get("max_activation"),
            )
        )
    return out


def with_max_activation(sub: ConceptSubspace, m: float) -> ConceptSubspace:
    return replace(sub, max_activation=float(m))
