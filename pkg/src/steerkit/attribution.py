"""Gradient attribution detectors: a classification head plus I×G and IG token scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import LabeledSequence
from .errors import LayerOutOfRange, MissingClass
from .numkit import AdamState, adam_step, backward_gradients, LossGraph, seeded_generator
from .toylm import SPACE, ToyLM


@dataclass
class ClsHeadConfig:
    hidden: int = 16
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 0.0
    activation: str = "tanh"  # or "identity"


@dataclass
class ClsHead:
    """Two affine layers, d -> hidden -> 1, with a nonlinearity between."""

    W1: torch.Tensor
    b1: torch.Tensor
    W2: torch.Tensor
    b2: torch.Tensor
    activation: str = "tanh"

    @classmethod
    def init(cls, d: int, hidden: int, seed: int, activation: str = "tanh") -> "ClsHead":
        g = seeded_generator(seed)
        return cls(
            torch.randn(d, hidden, generator=g) / math.sqrt(d),
            torch.zeros(hidden),
            torch.randn(hidden, generator=g) / math.sqrt(hidden),
            torch.zeros(()),
            activation,
        )

    @classmethod
    def linear(cls, v) -> "ClsHead":
        """F(h) = v . h, for closed-form checks."""
        v = torch.as_tensor(np.asarray(v, dtype=np.float64))
        return cls(v[:, None].clone(), torch.zeros(1), torch.ones(1), torch.zeros(()), "identity")

    @property
    def params(self) -> list[torch.Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def to_json(self) -> dict:
        return {"activation": self.activation, **{k: getattr(self, k).tolist() for k in ("W1", "b1", "W2", "b2")}}

    @classmethod
    def from_json(cls, d: dict) -> "ClsHead":
        t = {k: torch.tensor(d[k], dtype=torch.float64) for k in ("W1", "b1", "W2", "b2")}
        return cls(**t, activation=d["activation"])

    def with_params(self, params) -> "ClsHead":
        return ClsHead(*params, activation=self.activation)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        z = x @ self.W1 + self.b1
        if self.activation == "tanh":
            z = torch.tanh(z)
        elif self.activation != "identity":
            raise ValueError(f"unknown head activation {self.activation!r}")
        return z @ self.W2 + self.b2


@torch.no_grad()
def last_token_states(model: ToyLM, seqs: Sequence[LabeledSequence]) -> torch.Tensor:
    return torch.stack([model.run(torch.as_tensor(s.tokens)[None])[-1][0, -1] for s in seqs])


def train_cls_head(
    model: ToyLM,
    corpus: Sequence[LabeledSequence],
    seed: int = 0,
    cfg: ClsHeadConfig | None = None,
) -> ClsHead:
    """BCE on the last-layer state of each sequence's final token; model frozen."""
    cfg = cfg or ClsHeadConfig()
    y = np.array([1.0 if s.label == "positive" else 0.0 for s in corpus])
    if not len(y) or y.min() == y.max():
        raise MissingClass("classification head needs both classes")
    X = last_token_states(model, corpus)
    Y = torch.from_numpy(y)
    head = ClsHead.init(model.cfg.dim, cfg.hidden, seed, cfg.activation)
    rng = np.random.default_rng(seed)
    steps = cfg.epochs * math.ceil(len(y) / cfg.batch_size)
    state = AdamState(lr=cfg.lr, total_steps=max(steps, 1), weight_decay=cfg.weight_decay)
    params = head.params
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(y))
        for i in range(0, len(y), cfg.batch_size):
            b = torch.as_tensor(perm[i : i + cfg.batch_size])

            def fn(p, b=b):
                return F.binary_cross_entropy_with_logits(head.with_params(p)(X[b]), Y[b])

            grads = backward_gradients(LossGraph(fn, params))
            params = adam_step(state, params, grads)
    return head.with_params(params)


def head_accuracy(model: ToyLM, head: ClsHead, corpus: Sequence[LabeledSequence]) -> float:
    with torch.no_grad():
        pred = head(last_token_states(model, corpus)) > 0
    y = torch.tensor([s.label == "positive" for s in corpus])
    return float((pred == y).double().mean())


def _check_layer(model: ToyLM, layer: int) -> None:
    if not 0 <= layer <= model.cfg.layers:
        raise LayerOutOfRange(f"layer {layer} outside [0, {model.cfg.layers}]")


def layer_states(model: ToyLM, tokens: Sequence[int], layer: int) -> torch.Tensor:
    _check_layer(model, layer)
    with torch.no_grad():
        return model.run(torch.as_tensor(list(tokens))[None], stop_layer=layer)[layer][0]


def head_output_from_layer(model: ToyLM, head: ClsHead, tokens: torch.Tensor, h: torch.Tensor, layer: int) -> torch.Tensor:
    """F as a function of the layer-`layer` states h (batch, n, d); one value per batch row."""
    final = model.run(tokens, start_layer=layer, start_hidden=h)[-1]
    return head(final[:, -1])


def baseline_states(model: ToyLM, n: int, layer: int, token: int = SPACE) -> torch.Tensor:
    """The single baseline token's layer state, broadcast to n positions."""
    return layer_states(model, [token], layer)[0].expand(n, -1).clone()


def input_gradients(model: ToyLM, head: ClsHead, tokens: Sequence[int], layer: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(h, dF/dh) at layer `layer`, both (n, d)."""
    h = layer_states(model, tokens, layer)
    tok = torch.as_tensor(list(tokens))[None]
    x = h[None].clone().requires_grad_(True)
    (g,) = torch.autograd.grad(head_output_from_layer(model, head, tok, x, layer).sum(), x)
    return h, g[0]


def ixg_scores(model: ToyLM, head: ClsHead, tokens: Sequence[int], layer: int, multiply_input: bool = False) -> np.ndarray:
    """g_i = sum_dims |dF/dh_i|, or |h_i * dF/dh_i| with `multiply_input`."""
    h, g = input_gradients(model, head, tokens, layer)
    if multiply_input:
        g = g * h
    return g.abs().sum(-1).numpy()


def integrated_gradients(
    model: ToyLM,
    head: ClsHead,
    tokens: Sequence[int],
    layer: int,
    steps: int = 50,
    baseline: torch.Tensor | None = None,
    chunk: int = 64,
) -> tuple[np.ndarray, float, float]:
    """Signed IG matrix (n, d) with midpoint-rule path averaging.

    Returns (IG, F(x), F(baseline)). States are interpolated directly at the
    given layer and the upper layers are re-run at each point.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = layer_states(model, tokens, layer)
    n = h.shape[0]
    base = baseline_states(model, n, layer) if baseline is None else baseline
    tok = torch.as_tensor(list(tokens))[None]
    alphas = (torch.arange(steps, dtype=h.dtype) + 0.5) / steps
    delta = h - base
    total = torch.zeros_like(h)
    for i in range(0, steps, chunk):
        a = alphas[i : i + chunk]
        pts = (base[None] + a[:, None, None] * delta[None]).requires_grad_(True)
        out = head_output_from_layer(model, head, tok.expand(len(a), -1), pts, layer)
        (g,) = torch.autograd.grad(out.sum(), pts)
        total += g.sum(0)
    with torch.no_grad():
        fx = float(head_output_from_layer(model, head, tok, h[None], layer)[0])
        fb = float(head_output_from_layer(model, head, tok, base[None], layer)[0])
    return (delta * total / steps).numpy(), fx, fb


def ig_scores(model: ToyLM, head: ClsHead, tokens: Sequence[int], layer: int, steps: int = 50) -> np.ndarray:
    ig, _, _ = integrated_gradients(model, head, tokens, layer, steps)
    return np.abs(ig).sum(-1)


def attribution_token_scores(
    model: ToyLM,
    head: ClsHead,
    seqs: Sequence[LabeledSequence] | Sequence[Sequence[int]],
    layer: int,
    method: str = "ig",
    steps: int = 50,
) -> np.ndarray:
    """Flat per-token scores in ActivationDataset row order, ready for pooling."""
    toks = [getattr(s, "tokens", s) for s in seqs]
    if method == "ig":
        parts = [ig_scores(model, head, t, layer, steps) for t in toks]
    elif method == "ixg":
        parts = [ixg_scores(model, head, t, layer) for t in toks]
    else:
        raise ValueError(f"unknown attribution method {method!r}")
    return np.concatenate(parts) if parts else np.zeros(0)
