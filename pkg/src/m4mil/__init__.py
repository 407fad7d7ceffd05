"""Multi-proxy multi-gate mixture-of-experts for multiple-instance bags.

A from-scratch differentiable implementation of attention-pooled bag
models with mixture-of-experts multi-task heads, plus a synthetic bag
generator, a training/evaluation harness, and heatmap export.
"""

from .autodiff import Tensor, finite_diff_grad, max_relative_error, no_grad
from .data import (
    Bag,
    FoldSplit,
    Manifest,
    SyntheticSpec,
    generate_synthetic,
    kfold,
    load_dataset,
    make_fold_split,
    normalize_bags,
    normalize_features,
    read_bag,
    split_train_test,
    write_bag,
)
from .model import (
    M4Model,
    ModelConfig,
    ModelOutput,
    build,
    expert_heatmap,
    forward,
    load_params,
    multi_task_loss,
    save_params,
    task_heatmap,
)
# the fitting loop itself stays at m4mil.train.train so the submodule
# name is not shadowed by the function
from .train import (
    Adam,
    EvalReport,
    TrainConfig,
    auc,
    cross_validate,
    evaluate,
    gradcheck_suite,
)

__version__ = "0.1.0"
