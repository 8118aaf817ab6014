"""Planted-concept benchmark for concept detection and representation steering on a toy LM."""

from . import numkit  # noqa: F401  (sets the float64 default dtype first)
from .config import RunConfig
from .corpus import ConceptSpec, default_concepts, plant_concept_corpus, collect_activations
from .learners import fit_diffmean, fit_lat, fit_pca_subspace, fit_probe, fit_reft_r1, fit_ssv
from .toylm import ToyLMConfig, build_toy_lm

__all__ = [
    "RunConfig",
    "ConceptSpec",
    "default_concepts",
    "plant_concept_corpus",
    "collect_activations",
    "fit_diffmean",
    "fit_lat",
    "fit_pca_subspace",
    "fit_probe",
    "fit_reft_r1",
    "fit_ssv",
    "ToyLMConfig",
    "build_toy_lm",
]
