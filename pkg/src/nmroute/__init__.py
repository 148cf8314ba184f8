"""Difficulty-routed image restoration via dynamic N:M structured sparsity.

A tiny classifier predicts how hard each degraded image is to restore; the
prediction routes the image through one of several sparse subnetworks
carved out of a single shared-weight restoration network by dynamic N:M
magnitude masks, trading compute for quality per input.
"""

from .classifier import Classifier, ClassifierConfig, classifier_flops, predict_class
from .config import ExperimentConfig, parse_branch_set
from .datasynth import (
    Dataset,
    DifficultyTiers,
    LabeledSample,
    compute_tiers,
    deblur_fuse,
    extract_patches,
    procedural_clean,
    read_dataset,
    residual_remap,
    synth_gaussian,
    synthesize_splits,
    write_dataset,
)
from .errors import (
    ContractError,
    DegenerateSampleError,
    FormatError,
    MaskError,
    NmRouteError,
    ShapeError,
)
from .evalbench import EvalReport, bench_kernels, evaluate, psnr, ssim
from .losses import LossWeights, cost_loss, cross_entropy, entropy_loss, final_loss, weighted_l1
from .restoration import BranchSpec, RestorationNet, default_branches
from .sparsity import (
    CompressedNm,
    NmMask,
    NmPattern,
    compress,
    compute_mask,
    matmul_compressed,
    plain_ste_update,
    sr_ste_update,
)
from .tensor import BnBank, Tensor, backward, batchnorm2d, conv2d, gradcheck, linear
from .training import Adam, OptimConfig, StageConfig, adam_step, cosine_lr

__version__ = "0.1.0"
