"""Meta-learning for subject transfer: MAML pre-training and semi-supervised fine-tuning.

The package is organised bottom-up: ``ndgrad`` (array primitives and a
reverse-mode tape), ``backbones`` (MLP, STNN, CNN), ``objectives`` (joint
cross-entropy and center loss), ``optim``, ``meta`` (pre-training), ``adapt``
(target fine-tuning), ``data`` (datasets, file format, synthetic subjects) and
``harness`` (leave-one-subject-out experiments and statistics).
"""

from .adapt import AdaptConfig, ssml_finetune, supervised_finetune
from .backbones import ModelParams, ModelSpec, build, forward, predict
from .data import SubjectDataset, SynthConfig, few_shot_sample, load_datasets, loso_split, save_datasets, synth_generate
from .harness import ExperimentConfig, benchmark_config, run_loso
from .meta import MetaConfig, pretrain
from .objectives import ClassCenters

__all__ = [
    "AdaptConfig", "ClassCenters", "ExperimentConfig", "MetaConfig", "ModelParams", "ModelSpec", "SubjectDataset",
    "SynthConfig", "benchmark_config", "build", "few_shot_sample", "forward", "load_datasets", "loso_split",
    "predict", "pretrain", "run_loso", "save_datasets", "ssml_finetune", "supervised_finetune", "synth_generate",
]
__version__ = "0.1.0"
