"""Multi-attribute, multi-grained adapter experiments on a tiny transformer."""

from .adapters import (
    AdapterBank,
    BankConfig,
    CompositionContext,
    KronaModule,
    LoraModule,
    build_context,
    compose_delta,
    init_module,
    param_count,
)
from .autodiff import Tape, Tensor, backward, record
from .data import (
    AttributeSchema,
    Dataset,
    Sample,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    mask_tokens,
    partition,
    save_dataset,
)
from .evaluate import EvalReport, evaluate_model, metrics, predict_ensemble, predict_fused
from .model import BackboneConfig, ModelState, attach_bank, init_model, pretrain_base
from .optim import AdamW
from .training import TrainConfig, JointState, joint_step, mtl_loss, separation_phase, train_joint

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AdapterBank",
    "AttributeSchema",
    "BackboneConfig",
    "BankConfig",
    "CompositionContext",
    "Dataset",
    "EvalReport",
    "JointState",
    "KronaModule",
    "LoraModule",
    "ModelState",
    "Sample",
    "SyntheticConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "attach_bank",
    "backward",
    "build_context",
    "compose_delta",
    "evaluate_model",
    "generate_synthetic",
    "init_model",
    "init_module",
    "joint_step",
    "load_dataset",
    "mask_tokens",
    "metrics",
    "mtl_loss",
    "param_count",
    "partition",
    "predict_ensemble",
    "predict_fused",
    "pretrain_base",
    "record",
    "save_dataset",
    "separation_phase",
    "train_joint",
]
