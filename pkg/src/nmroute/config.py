"""Experiment configuration: one serializable bundle for every module.

A run's resolved config is always written into its output directory, so
any artifact can be reproduced from the directory alone. Branch sets use
the compact ablation naming: "1&2&4" means the 1:4, 2:4 and 4:4 patterns
(single digits are N out of M=4); explicit "n:m" tokens are also accepted,
e.g. "2:8&4:8".
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .classifier import ClassifierConfig
from .errors import ContractError, FormatError
from .losses import LossWeights
from .restoration import BranchSpec
from .sparsity import NmPattern
from .training import OptimConfig, StageConfig, default_stage_configs


@dataclass
class DataConfig:
    sigmas: tuple = (15.0, 25.0, 50.0)
    train_samples: int = 300
    test_samples: int = 90
    patch_size: int = 32
    stride: int = 32
    source_size: int = 64
    channels: int = 1
    cleans_dir: str | None = None


@dataclass
class NetConfig:
    depth: int = 5
    width: int = 16
    kernel_size: int = 3
    residual: bool = True
    mask_first_last: bool = False


@dataclass
class LossConfig:
    omega1: float = 1.0
    omega2: float = 0.05
    omega3: float = 0.1
    lambda_w: float = 2e-4
    branch_costs: tuple | None = None  # default: n/m per branch

    def weights(self) -> LossWeights:
        return LossWeights(self.omega1, self.omega2, self.omega3)


@dataclass
class ExperimentConfig:
    seed: int = 0
    branch_set: str = "1&2&4"
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    classifier_channels: tuple = (2, 2, 4, 4)
    classifier_kernel: int = 3
    optim: OptimConfig = field(default_factory=OptimConfig)
    stage1: StageConfig = field(default_factory=lambda: default_stage_configs()[0])
    stage2: StageConfig = field(default_factory=lambda: default_stage_configs()[1])
    stage3: StageConfig = field(default_factory=lambda: default_stage_configs()[2])
    scratch_epochs: int | None = None  # default: stage2+stage3 epochs
    scratch_lr_max: float = 1e-4
    scratch_lr_min: float = 1e-6
    shared_bn: bool = False

    # -- derived -------------------------------------------------------------

    def patterns(self) -> list[NmPattern]:
        return parse_branch_set(self.branch_set)

    def branches(self) -> list[BranchSpec]:
        pats = self.patterns()
        if self.loss.branch_costs is not None:
            costs = list(self.loss.branch_costs)
            if len(costs) != len(pats):
                raise ContractError(f"{len(pats)} branches but {len(costs)} costs")
        else:
            costs = [p.density for p in pats]
        return [BranchSpec(pattern=p, cost=c, bn_bank_index=i) for i, (p, c) in enumerate(zip(pats, costs))]

    def num_classes(self) -> int:
        return len(self.patterns())

    def classifier_config(self) -> ClassifierConfig:
        return ClassifierConfig(
            num_classes=self.num_classes(),
            block_channels=tuple(self.classifier_channels),
            kernel_size=self.classifier_kernel,
            in_channels=self.data.channels,
        )

    def scratch_stage(self) -> StageConfig:
        epochs = self.scratch_epochs if self.scratch_epochs is not None else self.stage2.epochs + self.stage3.epochs
        return StageConfig(epochs, self.scratch_lr_max, self.scratch_lr_min, self.stage2.batch_size)


def parse_branch_set(spec: str) -> list[NmPattern]:
    """Parse "1&2&4" / "2:4&4:4" into patterns sorted sparse-to-dense."""
    pats = []
    for tok in spec.split("&"):
        tok = tok.strip()
        if not tok:
            continue
        if ":" in tok:
            n_s, m_s = tok.split(":")
            pats.append(NmPattern(int(n_s), int(m_s)))
        else:
            pats.append(NmPattern(int(tok), 4))
    if not pats:
        raise ContractError(f"empty branch set {spec!r}")
    pats.sort(key=lambda p: (p.density, p.m))
    if len({(p.n, p.m) for p in pats}) != len(pats):
        raise ContractError(f"duplicate patterns in branch set {spec!r}")
    return pats


# ---------------------------------------------------------------------------
# (de)serialization
# ---------------------------------------------------------------------------


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def _build(dc_type, data: dict):
    kwargs = {}
    for f in fields(dc_type):
        if f.name not in data:
            continue
        v = data[f.name]
        if isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    return dc_type(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise FormatError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(data)
    for name, sub in (("data", DataConfig), ("net", NetConfig), ("loss", LossConfig),
                      ("optim", OptimConfig), ("stage1", StageConfig), ("stage2", StageConfig),
                      ("stage3", StageConfig)):
        if name in kwargs and isinstance(kwargs[name], dict):
            kwargs[name] = _build(sub, kwargs[name])
    if "classifier_channels" in kwargs and isinstance(kwargs["classifier_channels"], list):
        kwargs["classifier_channels"] = tuple(kwargs["classifier_channels"])
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed JSON config ({e})") from e
    return config_from_dict(data)


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def apply_override(cfg_dict: dict, dotted_key: str, raw_value: str) -> None:
    """Set ``a.b.c=value`` inside a nested config dict (JSON-typed value)."""
    parts = dotted_key.split(".")
    node = cfg_dict
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise FormatError(f"unknown config path {dotted_key!r}")
        node = node[p]
    leaf = parts[-1]
    if leaf not in node:
        raise FormatError(f"unknown config key {dotted_key!r}")
    try:
        node[leaf] = json.loads(raw_value)
    except json.JSONDecodeError:
        node[leaf] = raw_value
