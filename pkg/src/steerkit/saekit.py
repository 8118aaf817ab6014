"""JumpReLU SAE inference: detection, clamping interventions, AUROC latent selection.

Conventions: `W_enc` is (d, z), `W_dec` is (z, d). The detection score of
latent f is JumpReLU(h . W_enc[:, f] + b_enc[f]) with threshold theta_f. The
clamping formulas work with the raw encoder projection z_f = h . W_enc[:, f]
and the reconstruction error Err(h) = h - (W_enc^T h) W_dec.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ActivationDataset
from .detection import auroc, pooled_scores
from .errors import FormatError, IndexOutOfRange, MissingClass, TooManyPlants
from .learners import ConceptSubspace


@dataclass
class SaeDictionary:
    W_enc: np.ndarray
    W_dec: np.ndarray
    b_enc: np.ndarray
    threshold: np.ndarray
    max_activations: np.ndarray

    def __post_init__(self):
        for name in ("W_enc", "W_dec", "b_enc", "threshold", "max_activations"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d, z = self.W_enc.shape
        if self.W_dec.shape != (z, d) or self.b_enc.shape != (z,) or self.threshold.shape != (z,) or self.max_activations.shape != (z,):
            raise FormatError("inconsistent SAE shapes")
        if (self.threshold < 0).any() or (self.max_activations < 0).any():
            raise FormatError("thresholds and max activations must be non-negative")

    @property
    def d(self) -> int:
        return self.W_enc.shape[0]

    @property
    def z(self) -> int:
        return self.W_enc.shape[1]

    def check(self, f: int) -> None:
        if not 0 <= f < self.z:
            raise IndexOutOfRange(f"latent {f} outside [0, {self.z})")

    def encode(self, H: np.ndarray) -> np.ndarray:
        """JumpReLU activations of every latent, rows x z."""
        x = np.atleast_2d(H) @ self.W_enc + self.b_enc
        return np.where(x > self.threshold, x, 0.0)

    def latent_subspace(self, f: int, concept_id: str = "") -> ConceptSubspace:
        self.check(f)
        return ConceptSubspace(
            self.W_enc[:, f].copy(),
            "sae",
            concept_id,
            unit_norm=False,
            activation="jumprelu",
            threshold=float(self.threshold[f]),
            bias=float(self.b_enc[f]),
            max_activation=float(self.max_activations[f]),
        )


def sae_detect(sae: SaeDictionary, f: int, h: np.ndarray):
    """JumpReLU score x * 1[x > theta_f] with x = h . W_enc[:, f] + b_enc[f]."""
    sae.check(f)
    x = np.asarray(h, dtype=np.float64) @ sae.W_enc[:, f] + sae.b_enc[f]
    out = np.where(x > sae.threshold[f], x, 0.0)
    return float(out) if out.ndim == 0 else out


def latent_value(sae: SaeDictionary, f: int, h: np.ndarray):
    """Raw encoder projection z_f = h . W_enc[:, f] used by the clamping formulas."""
    sae.check(f)
    return np.asarray(h, dtype=np.float64) @ sae.W_enc[:, f]


def _clamp_full(sae: SaeDictionary, f: int, h: np.ndarray, target) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    latents = h @ sae.W_enc
    err = h - latents @ sae.W_dec
    zf = latents[..., f]
    clamped = latents.copy()
    clamped[..., f] += np.asarray(target) - zf
    return clamped @ sae.W_dec + err


def sae_clamp_intervene(sae: SaeDictionary, f: int, h: np.ndarray, target, simplified: bool = False) -> np.ndarray:
    """Set latent f to `target` and add back the reconstruction error.

    Equal to h + (target - z_f) W_dec[f] after simplification; the default
    path evaluates the full reconstruction formula.
    """
    sae.check(f)
    h = np.asarray(h, dtype=np.float64)
    if simplified:
        zf = h @ sae.W_enc[:, f]
        return h + np.multiply.outer(np.asarray(target) - zf, sae.W_dec[f])
    return _clamp_full(sae, f, h, target)


def sae_min_clamp_intervene(sae: SaeDictionary, f: int, h: np.ndarray, target, simplified: bool = False) -> np.ndarray:
    """Clamp only when z_f is below `target` (effective target max(target, z_f))."""
    sae.check(f)
    h = np.asarray(h, dtype=np.float64)
    zf = h @ sae.W_enc[:, f]
    return sae_clamp_intervene(sae, f, h, np.maximum(target, zf), simplified)


def latent_aurocs(sae: SaeDictionary, ds: ActivationDataset, pooling: str = "max") -> np.ndarray:
    y = ds.y
    if not (y == 1).any() or not (y == 0).any():
        raise MissingClass("latent selection needs both classes")
    acts = sae.encode(ds.rows)
    return np.array([auroc(pooled_scores(acts[:, f], ds, pooling), y) for f in range(sae.z)])


def select_feature_auroc(sae: SaeDictionary, ds: ActivationDataset) -> int:
    """SAE-A: the latent whose max-pooled activations best rank the labels.

    Ties go to the lowest index.
    """
    scores = latent_aurocs(sae, ds)
    return int(np.flatnonzero(scores == scores.max())[0])


def plant_sae(
    seed: int,
    d: int,
    z: int,
    planted: dict[str, np.ndarray],
    reference: np.ndarray | None = None,
) -> tuple[SaeDictionary, dict[str, int]]:
    """Random dictionary with one exactly aligned latent per planted concept.

    Planted latents get encoder column = decoder row = the direction, zero bias
    and zero threshold; their index is drawn at random. The remaining latents
    are random unit directions. Max activations come from `reference` rows
    when given, else 1.
    """
    if len(planted) > z:
        raise TooManyPlants(f"{len(planted)} plants do not fit into {z} latents")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((z, d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    slots = rng.permutation(z)[: len(planted)]
    index = {}
    for slot, (cid, v) in zip(slots, sorted(planted.items())):
        v = np.asarray(v, dtype=np.float64)
        if abs(np.linalg.norm(v) - 1.0) > 1e-8:
            raise ValueError(f"planted direction for {cid} is not unit-norm")
        W[slot] = v
        index[cid] = int(slot)
    sae = SaeDictionary(W.T.copy(), W.copy(), np.zeros(z), np.zeros(z), np.ones(z))
    if reference is not None and len(reference):
        sae.max_activations = sae.encode(reference).max(0)
    return sae, index


_SAE_ARRAYS = ("W_enc", "W_dec", "b_enc", "threshold", "max_activations")


def save_sae(sae: SaeDictionary, directory: str | Path, index: dict[str, int] | None = None) -> None:
    """`header.json` + `sae.f32` holding W_enc, W_dec, b_enc, theta, m (LE float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "steerkit-sae-v1",
        "d": sae.d,
        "z": sae.z,
        "has_threshold": True,
        "order": list(_SAE_ARRAYS),
        "concept_latents": dict(sorted((index or {}).items())),
    }
    (directory / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    with open(directory / "sae.f32", "wb") as f:
        for name in _SAE_ARRAYS:
            f.write(getattr(sae, name).astype("<f4").tobytes())


def load_sae(directory: str | Path) -> tuple[SaeDictionary, dict[str, int]]:
    directory = Path(directory)
    header = json.loads((directory / "header.json").read_text())
    d, z = int(header["d"]), int(header["z"])
    has_theta = bool(header.get("has_threshold", True))
    sizes = {"W_enc": d * z, "W_dec": z * d, "b_enc": z, "threshold": z if has_theta else 0, "max_activations": z}
    blob = (directory / "sae.f32").read_bytes()
    expected = 4 * sum(sizes.values())
    if len(blob) != expected:
        raise FormatError(f"sae.f32 has {len(blob)} bytes, expected {expected}")
    arrays = {}
    off = 0
    for name in _SAE_ARRAYS:
        n = sizes[name]
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += 4 * n
    if not has_theta:
        arrays["threshold"] = np.zeros(z)
    sae = SaeDictionary(
        arrays["W_enc"].reshape(d, z),
        arrays["W_dec"].reshape(z, d),
        arrays["b_enc"],
        arrays["threshold"],
        arrays["max_activations"],
    )
    return sae, {k: int(v) for k, v in header.get("concept_latents", {}).items()}
