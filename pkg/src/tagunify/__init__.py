"""Unifying named-entity taggers trained on heterogeneous tag sets.

Linear-chain CRF inference and losses over a tag hierarchy, marginal-CRF
training on partially annotated corpora, and distillation of several frozen
teachers into one student over the unified label space.
"""

from .corpus import (AnnotatedCorpus, GeneratorSpec, generate_synthetic, read_conll, selective_retag,
                     write_conll)
from .estimators import CRFTagger, MardiDistiller, MarginalCRFTagger, select_alpha
from .evalmetrics import EvalResult, micro_prf
from .features import Model
from .lattice import Lattice
from .objectives import DistillConfig
from .tagspace import (HierarchyError, TagHierarchy, TagSet, build_hierarchy, flat_hierarchy,
                       load_hierarchy)
from .trainer import TrainConfig, TrainingDiverged
from .unify import ScenarioConfig, TeacherHandle, distill, postprocess_merge

__version__ = "0.1.0"

__all__ = [
    "AnnotatedCorpus", "CRFTagger", "DistillConfig", "EvalResult", "GeneratorSpec",
    "HierarchyError", "Lattice", "MardiDistiller", "MarginalCRFTagger", "Model",
    "ScenarioConfig", "TagHierarchy", "TagSet", "TeacherHandle", "TrainConfig",
    "TrainingDiverged", "build_hierarchy", "distill", "generate_synthetic", "load_hierarchy",
    "flat_hierarchy", "micro_prf", "postprocess_merge", "read_conll", "select_alpha",
    "selective_retag", "write_conll",
]
