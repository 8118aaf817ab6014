"""Dense numerics used everywhere else: spectral routines, gradients, Adam.

Reverse-mode differentiation is delegated to torch autograd (float64 on CPU);
this module wraps it behind a small `LossGraph` contract so every learner loss
can be checked against central finite differences computed here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import DegenerateInput, NonScalarLoss, ShapeMismatch

torch.set_default_dtype(torch.float64)

DTYPE = torch.float64

POWER_MAX_ITERS = 1000
POWER_TOL = 1e-10
# Each power step multiplies by (X^T X)^(2**_SQUARINGS); keeps convergence
# inside the iteration cap when the top two eigenvalues are close.
_SQUARINGS = 3


def fix_sign(v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Flip `v` so its first entry with |v_i| > tol is positive."""
    nz = np.flatnonzero(np.abs(v) > tol)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def top_principal_component(X) -> np.ndarray:
    """Unit vector v maximising ||X v||^2, by power iteration on X^T X.

    No centering is done here. Raises DegenerateInput for all-zero input.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateInput(f"need a 2-D matrix with >= 2 rows, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DegenerateInput("matrix has non-finite entries")
    C = X.T @ X
    scale = np.abs(C).max()
    if scale == 0.0:
        raise DegenerateInput("matrix is all zero")
    C = C / scale
    for _ in range(_SQUARINGS):
        C = C @ C
        C = C / np.abs(C).max()
    # start from the heaviest column of the Gram matrix: never orthogonal to
    # the dominant eigenvector unless that eigenvalue is zero
    v = C[:, int(np.argmax(np.linalg.norm(C, axis=0)))].copy()
    v /= np.linalg.norm(v)
    for _ in range(POWER_MAX_ITERS):
        w = C @ v
        n = np.linalg.norm(w)
        if n == 0.0:
            raise DegenerateInput("matrix has rank 0")
        w /= n
        done = np.linalg.norm(w - v) < POWER_TOL
        v = w
        if done:
            break
    return fix_sign(v / np.linalg.norm(v))


def unit(v):
    """v / ||v|| for a torch tensor or numpy array."""
    if isinstance(v, torch.Tensor):
        return v / v.norm()
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass
class LossGraph:
    """A scalar loss as a function of leaf parameters.

    `fn(params)` must rebuild the forward computation from the given tensors;
    that lets `finite_diff_check` re-evaluate it at perturbed points.
    """

    fn: Callable[[list[torch.Tensor]], torch.Tensor]
    params: list[torch.Tensor]

    def evaluate(self, params: Sequence[torch.Tensor] | None = None) -> torch.Tensor:
        return self.fn(list(self.params if params is None else params))


def backward_gradients(graph: LossGraph) -> list[torch.Tensor]:
    leaves = [p.detach().clone().requires_grad_(True) for p in graph.params]
    loss = graph.fn(leaves)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        shape = tuple(loss.shape) if isinstance(loss, torch.Tensor) else type(loss)
        raise NonScalarLoss(f"loss must be scalar, got {shape}")
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in leaves]
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(leaves, grads)]


def finite_diff_gradients(graph: LossGraph, step: float = 1e-5) -> list[torch.Tensor]:
    """Central-difference gradient for every coordinate of every parameter."""
    base = [p.detach().clone() for p in graph.params]
    out = []
    with torch.no_grad():
        for k, p in enumerate(base):
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                hi = float(graph.fn(base))
                flat[j] = orig - step
                lo = float(graph.fn(base))
                flat[j] = orig
                gflat[j] = (hi - lo) / (2.0 * step)
            out.append(g)
    return out


def finite_diff_check(graph: LossGraph, step: float = 1e-5) -> float:
    """Max over parameter tensors of ||analytic - central|| / (||analytic|| + 1e-12)."""
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = backward_gradients(graph)
    numeric = finite_diff_gradients(graph, step)
    errs = [
        float((a - n).norm() / (a.norm() + 1e-12)) for a, n in zip(analytic, numeric)
    ]
    return max(errs) if errs else 0.0


@dataclass
class AdamState:
    lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    def current_lr(self) -> float:
        """Linear decay from `lr` at step 0 towards 0 at `total_steps`."""
        if self.total_steps <= 0:
            return self.lr
        return self.lr * max(0.0, 1.0 - self.step / self.total_steps)


def project_out(g: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Remove the component of `g` along unit vector `w`."""
    return g - torch.dot(g, w) * w


def adam_step(
    state: AdamState,
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    projection: torch.Tensor | None = None,
) -> list[torch.Tensor]:
    """One AdamW update; returns new parameter tensors and advances `state`.

    With `projection`, every 1-D parameter of matching shape has its gradient
    component along `projection` removed before the moments are updated.
    """
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {tuple(p.shape)} vs grad {tuple(g.shape)}")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    elif len(state.m) != len(params) or any(
        m.shape != p.shape for m, p in zip(state.m, params)
    ):
        raise ShapeMismatch("Adam moments do not match parameter shapes")

    lr = state.current_lr()
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g.detach()
        if projection is not None and p.dim() == 1 and p.shape == projection.shape:
            g = project_out(g, projection)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**t)
        v_hat = state.v[i] / (1 - b2**t)
        new = p.detach() - lr * state.weight_decay * p.detach()
        new = new - lr * m_hat / (v_hat.sqrt() + state.eps)
        out.append(new)
    return out


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2**63))
    return g


def random_unit(d: int, seed: int) -> torch.Tensor:
    v = torch.randn(d, generator=seeded_generator(seed), dtype=DTYPE)
    return unit(v)
