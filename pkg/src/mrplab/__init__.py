"""Continual machine unlearning by hidden-state projection on a small numpy transformer."""

import os

# MRPLAB_THREADS caps BLAS threads; effective only if set before numpy is first imported.
if os.environ.get("MRPLAB_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["MRPLAB_THREADS"])

from .baselines import AttackConfig, GaConfig, ga_unlearn, relearn_attack  # noqa: E402
from .evalkit import ScoreReport, build_report, qa_accuracy, random_baseline, task_score  # noqa: E402
from .linalg import ProjectionBasis, apply_projection, pca_top_k, qr_orthobasis  # noqa: E402
from .mrp import HookState, MrpConfig, continual_unlearn, init_projection, train_projection, unlearn_task  # noqa: E402
from .nanomodel.model import BaseModel, HookedModel, ModelConfig  # noqa: E402
from .taskgen import generate_corpus, related_attack_split  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "BaseModel", "GaConfig", "HookState", "HookedModel", "ModelConfig", "MrpConfig",
    "ProjectionBasis", "ScoreReport", "apply_projection", "build_report", "continual_unlearn",
    "ga_unlearn", "generate_corpus", "init_projection", "pca_top_k", "qa_accuracy", "qr_orthobasis",
    "random_baseline", "related_attack_split", "relearn_attack", "task_score", "train_projection",
    "unlearn_task",
]
