"""A deterministic toy decoder-only transformer with a residual-stream hook.

Architecture: tied token embeddings, pre-LayerNorm blocks (no affine LN
parameters), causal multi-head attention with fixed ALiBi distance biases and
a GELU MLP. Hidden state `l` is the residual stream after block `l`; state 0
is the raw embedding. All weights are float64 and come from one seeded
generator, so the same config always builds the same model.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Collection, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    EmptyResponse,
    FormatError,
    InvalidConfig,
    LayerOutOfRange,
    SequenceTooLong,
    TokenOutOfRange,
)
from .numkit import DTYPE, seeded_generator

PAD, BOS, EOS, SPACE = 0, 1, 2, 3
RESERVED = (PAD, BOS, EOS, SPACE)


@dataclass(frozen=True)
class ToyLMConfig:
    vocab_size: int = 64
    dim: int = 32
    layers: int = 2
    heads: int = 4
    max_seq: int = 128
    seed: int = 0
    # softmax temperature folded into the tied unembedding
    logit_scale: float = 1.0

    def validate(self) -> None:
        if self.vocab_size < len(RESERVED):
            raise InvalidConfig(f"vocab_size must be >= {len(RESERVED)}")
        if self.dim <= 0 or self.layers <= 0 or self.heads <= 0 or self.max_seq <= 0:
            raise InvalidConfig("dim, layers, heads and max_seq must be positive")
        if self.dim % self.heads:
            raise InvalidConfig(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class HookSpec:
    """Replace the residual stream after block `layer` with `fn(h)`.

    `fn` receives a (batch, seq, dim) tensor and must return the same shape.
    """

    layer: int
    fn: Callable[[torch.Tensor], torch.Tensor]


@dataclass
class HiddenTrace:
    hidden: torch.Tensor  # (layers + 1, seq, dim)
    logits: torch.Tensor  # (seq, vocab)


_NAMED = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", SPACE: "<sp>", 4: "[", 5: "]", 6: "+", 7: "="}
_BY_NAME = {v: k for k, v in _NAMED.items()}


def symbol(token: int) -> str:
    return _NAMED.get(token, f"t{token:02d}")


def token_of(sym: str) -> int:
    if sym in _BY_NAME:
        return _BY_NAME[sym]
    if not (sym.startswith("t") and sym[1:].isdigit()):
        raise KeyError(sym)
    return int(sym[1:])


def detokenize(tokens: Sequence[int]) -> str:
    return " ".join(symbol(int(t)) for t in tokens)


def _layer_norm(x: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=1e-5)


class ToyLM:
    """Weights plus the forward pass. Treat instances as immutable."""

    def __init__(self, cfg: ToyLMConfig, weights: dict[str, torch.Tensor]):
        self.cfg = cfg
        self.weights = weights
        slopes = [2.0 ** (-8.0 * (h + 1) / cfg.heads) for h in range(cfg.heads)]
        pos = torch.arange(cfg.max_seq)
        dist = (pos[:, None] - pos[None, :]).to(DTYPE)
        bias = -torch.tensor(slopes, dtype=DTYPE)[:, None, None] * dist
        causal = pos[None, :] <= pos[:, None]
        self._alibi = bias.masked_fill(~causal, float("-inf"))

    @staticmethod
    def param_shapes(cfg: ToyLMConfig) -> list[tuple[str, tuple[int, ...]]]:
        d = cfg.dim
        shapes = [("tok_emb", (cfg.vocab_size, d))]
        for i in range(cfg.layers):
            shapes += [
                (f"b{i}.wq", (d, d)),
                (f"b{i}.wk", (d, d)),
                (f"b{i}.wv", (d, d)),
                (f"b{i}.wo", (d, d)),
                (f"b{i}.w1", (d, 4 * d)),
                (f"b{i}.b1", (4 * d,)),
                (f"b{i}.w2", (4 * d, d)),
                (f"b{i}.b2", (d,)),
            ]
        return shapes

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, _ in self.param_shapes(self.cfg):
            h.update(self.weights[name].numpy().astype("<f8").tobytes())
        return h.hexdigest()

    # -- forward machinery -------------------------------------------------

    def _block(self, i: int, x: torch.Tensor) -> torch.Tensor:
        w = self.weights
        cfg = self.cfg
        B, T, d = x.shape
        H = cfg.heads
        hd = d // H
        a = _layer_norm(x)
        q = (a @ w[f"b{i}.wq"]).view(B, T, H, hd).transpose(1, 2)
        k = (a @ w[f"b{i}.wk"]).view(B, T, H, hd).transpose(1, 2)
        v = (a @ w[f"b{i}.wv"]).view(B, T, H, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd) + self._alibi[:, :T, :T]
        att = torch.softmax(scores, dim=-1)
        o = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + o @ w[f"b{i}.wo"]
        m = _layer_norm(x)
        m = F.gelu(m @ w[f"b{i}.w1"] + w[f"b{i}.b1"])
        return x + m @ w[f"b{i}.w2"] + w[f"b{i}.b2"]

    def check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise TokenOutOfRange(f"token ids must lie in [0, {self.cfg.vocab_size})")
        if tokens.shape[-1] > self.cfg.max_seq:
            raise SequenceTooLong(f"length {tokens.shape[-1]} > max_seq {self.cfg.max_seq}")

    def run(
        self,
        tokens: torch.Tensor,
        hook: HookSpec | None = None,
        *,
        start_layer: int = 0,
        start_hidden: torch.Tensor | None = None,
        stop_layer: int | None = None,
    ) -> list[torch.Tensor]:
        """Batched forward; returns residual states [h^start, ..., h^stop].

        With `start_hidden`, blocks before `start_layer` are skipped and the
        given (batch, seq, dim) tensor is used as h^start_layer.
        """
        cfg = self.cfg
        stop = cfg.layers if stop_layer is None else stop_layer
        if hook is not None and not 0 <= hook.layer <= cfg.layers:
            raise LayerOutOfRange(f"hook layer {hook.layer} outside [0, {cfg.layers}]")
        if start_hidden is None:
            self.check_tokens(tokens)
            x = self.weights["tok_emb"][tokens]
        else:
            if start_hidden.shape[-2] > cfg.max_seq:
                raise SequenceTooLong(f"length {start_hidden.shape[-2]} > max_seq {cfg.max_seq}")
            x = start_hidden
        if hook is not None and hook.layer == start_layer:
            x = hook.fn(x)
        states = [x]
        for i in range(start_layer, stop):
            x = self._block(i, x)
            if hook is not None and hook.layer == i + 1:
                x = hook.fn(x)
            states.append(x)
        return states

    def logits(self, h_last: torch.Tensor) -> torch.Tensor:
        emb = self.weights["tok_emb"]
        return _layer_norm(h_last) @ emb.T * (self.cfg.logit_scale / math.sqrt(self.cfg.dim))


def build_toy_lm(cfg: ToyLMConfig | None = None) -> ToyLM:
    cfg = cfg or ToyLMConfig()
    cfg.validate()
    g = seeded_generator(cfg.seed)
    weights: dict[str, torch.Tensor] = {}
    for name, shape in ToyLM.param_shapes(cfg):
        if name == "tok_emb":
            t = torch.randn(shape, generator=g, dtype=DTYPE)
        elif name.endswith((".b1", ".b2")):
            t = 0.02 * torch.randn(shape, generator=g, dtype=DTYPE)
        else:
            t = torch.randn(shape, generator=g, dtype=DTYPE) / math.sqrt(shape[0])
        weights[name] = t
    return ToyLM(cfg, weights)


def _as_tokens(tokens) -> torch.Tensor:
    return torch.as_tensor(np.asarray(tokens, dtype=np.int64))


def forward_hidden(model: ToyLM, tokens, hook: HookSpec | None = None) -> HiddenTrace:
    t = _as_tokens(tokens)
    if t.dim() != 1:
        raise ValueError("forward_hidden takes a single 1-D token sequence")
    states = model.run(t[None, :], hook)
    hidden = torch.stack([s[0] for s in states])
    return HiddenTrace(hidden=hidden, logits=model.logits(states[-1][0]))


def batch_nll(
    model: ToyLM,
    tokens: torch.Tensor,
    loss_mask: torch.Tensor,
    hook: HookSpec | None = None,
) -> torch.Tensor:
    """Mean next-token NLL over positions where `loss_mask` is true.

    `tokens` is (batch, seq), right-padded; `loss_mask[b, t]` marks that token
    t of row b is a target (predicted from positions < t).
    """
    states = model.run(tokens, hook)
    logits = model.logits(states[-1])[:, :-1]
    targets = tokens[:, 1:]
    mask = loss_mask[:, 1:].to(DTYPE)
    logp = torch.log_softmax(logits, dim=-1).gather(-1, targets[..., None])[..., 0]
    return -(logp * mask).sum() / mask.sum()


def lm_nll(model: ToyLM, prompt_tokens, response_tokens, hook: HookSpec | None = None) -> torch.Tensor:
    prompt = list(map(int, prompt_tokens))
    response = list(map(int, response_tokens))
    if not response:
        raise EmptyResponse("response must contain at least one token")
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    seq = _as_tokens(prompt + response)[None, :]
    mask = torch.zeros_like(seq, dtype=torch.bool)
    mask[0, len(prompt):] = True
    return batch_nll(model, seq, mask, hook)


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad with PAD; returns (tokens, valid-position mask)."""
    T = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), T), PAD, dtype=torch.long)
    valid = torch.zeros((len(seqs), T), dtype=torch.bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        valid[i, : len(s)] = True
    return tokens, valid


def sample_token(logits: np.ndarray, temperature: float | None, rng: np.random.Generator | None) -> int:
    if temperature is None or temperature <= 0:
        return int(np.argmax(logits))
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


@torch.no_grad()
def generate(
    model: ToyLM,
    prompt_tokens,
    hook: HookSpec | None = None,
    max_new: int = 32,
    temperature: float | None = None,
    seed: int | None = None,
    banned: Collection[int] = (),
) -> list[int]:
    """Sample up to `max_new` tokens after the prompt, stopping after EOS.

    `temperature=None` is greedy decoding. PAD and BOS are never produced;
    `banned` adds further ids that must not be produced.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    rng = np.random.default_rng(seed) if temperature else None
    seq = list(map(int, prompt_tokens))
    out: list[int] = []
    block = np.zeros(model.cfg.vocab_size, dtype=bool)
    block[[PAD, BOS, *banned]] = True
    for _ in range(max_new):
        if len(seq) >= model.cfg.max_seq:
            break
        states = model.run(_as_tokens(seq)[None, :], hook)
        logits = model.logits(states[-1][0, -1]).numpy().copy()
        logits[block] = -np.inf
        tok = sample_token(logits, temperature, rng)
        out.append(tok)
        seq.append(tok)
        if tok == EOS:
            break
    return out


@torch.no_grad()
def generate_batch(
    model: ToyLM,
    prompt_tokens,
    n_rows: int,
    hook: HookSpec | None = None,
    max_new: int = 32,
    temperature: float | None = 1.0,
    seeds: Sequence[int] | None = None,
    banned: Collection[int] = (),
) -> list[list[int]]:
    """`n_rows` continuations of one prompt, each with its own sampling seed.

    The hook sees the whole (n_rows, seq, dim) batch, so rows may be steered
    differently. Rows stop independently after EOS.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    if seeds is not None and len(seeds) != n_rows:
        raise ValueError("need one seed per row")
    rngs = [np.random.default_rng(s) for s in seeds] if seeds is not None else [None] * n_rows
    prompt = list(map(int, prompt_tokens))
    seq = _as_tokens(prompt)[None, :].repeat(n_rows, 1)
    outs: list[list[int]] = [[] for _ in range(n_rows)]
    done = np.zeros(n_rows, dtype=bool)
    block = np.zeros(model.cfg.vocab_size, dtype=bool)
    block[[PAD, BOS, *banned]] = True
    for _ in range(max_new):
        if seq.shape[1] >= model.cfg.max_seq or done.all():
            break
        states = model.run(seq, hook)
        logits = model.logits(states[-1][:, -1]).numpy().copy()
        logits[:, block] = -np.inf
        nxt = np.full(n_rows, PAD)
        for r in np.flatnonzero(~done):
            tok = sample_token(logits[r], temperature, rngs[r])
            outs[r].append(tok)
            nxt[r] = tok
            done[r] = tok == EOS
        # finished rows keep a PAD tail; causal attention keeps it out of other rows
        seq = torch.cat([seq, torch.as_tensor(nxt)[:, None]], dim=1)
    return outs


def save_model(model: ToyLM, path: str | Path) -> None:
    """Write `<path>.json` (config + parameter order) and `<path>.bin` (LE float64)."""
    path = Path(path)
    shapes = ToyLM.param_shapes(model.cfg)
    header = {
        "format": "steerkit-toylm-v1",
        "config": asdict(model.cfg),
        "seed": model.cfg.seed,
        "params": [[n, list(s)] for n, s in shapes],
        "checksum": model.checksum(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    with open(path.with_suffix(".bin"), "wb") as f:
        for name, _ in shapes:
            f.write(model.weights[name].numpy().astype("<f8").tobytes())


def load_model(path: str | Path) -> ToyLM:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    cfg = ToyLMConfig(**header["config"])
    cfg.validate()
    blob = path.with_suffix(".bin").read_bytes()
    expected = sum(8 * math.prod(s) for _, s in ToyLM.param_shapes(cfg))
    if len(blob) != expected:
        raise FormatError(f"model blob has {len(blob)} bytes, expected {expected}")
    weights = {}
    off = 0
    for name, shape in ToyLM.param_shapes(cfg):
        n = math.prod(shape)
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        weights[name] = torch.from_numpy(arr.astype(np.float64))
        off += 8 * n
    model = ToyLM(cfg, weights)
    if header.get("checksum") and header["checksum"] != model.checksum():
        raise FormatError("model checksum mismatch")
    return model
