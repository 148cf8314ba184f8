"""Three-stage training pipeline, optimizer, schedule, and checkpointing.

Stage 1 pretrains the classifier with cross-entropy on pseudo labels.
Stage 2 freezes the classifier and trains the restoration network on the
probability-weighted L1 loss, passing every sample through all branches.
Stage 3 relaxes everything and finetunes on the combined loss, which is
what lets the classifier drift away from its pseudo labels toward whatever
routing actually trades reconstruction against cost.

Weight decay for pruned positions enters the Adam update as an additive
gradient term, scaled per branch by the batch-mean routing probability and
summed over branches (the same weighting the reconstruction loss uses).
Optimizer moments restart at each stage boundary.

All randomness flows through one numpy Generator whose state is saved in
checkpoints, so an interrupted run resumed from disk is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import Classifier, ClassifierConfig
from .errors import ContractError, FormatError
from .losses import LossWeights, cost_loss, cross_entropy, entropy_loss, final_loss, weighted_l1
from .restoration import BranchSpec, RestorationNet
from .sparsity import NmPattern
from .tensor import Tensor, backward, zero_grads
from .tensorio import read_tensor, write_tensor


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class StageConfig:
    epochs: int
    lr_max: float
    lr_min: float
    batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be non-negative")
        if not (self.lr_max >= self.lr_min > 0):
            raise ContractError("need lr_max >= lr_min > 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def default_stage_configs() -> tuple[StageConfig, StageConfig, StageConfig]:
    """Desk-scale epochs with the full-scale learning-rate endpoints."""
    return (
        StageConfig(30, 1e-3, 1e-6, 32),
        StageConfig(60, 1e-4, 1e-6, 32),
        StageConfig(60, 1e-5, 1e-7, 32),
    )


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from lr_max (t=0) to lr_min (t=total)."""
    if total <= 0:
        raise ContractError("total steps must be positive")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam for one parameter; returns (param, m, v).

    ``t`` is the 1-based step count. One step from zero moments gives
    delta = -lr * g / (|g| + eps).
    """
    m2 = beta1 * m + (1.0 - beta1) * grad
    v2 = beta2 * v + (1.0 - beta2) * grad * grad
    mhat = m2 / (1.0 - beta1**t)
    vhat = v2 / (1.0 - beta2**t)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m2, v2


class Adam:
    """Adam over a fixed parameter list, with moments exposed for checkpoints."""

    def __init__(self, params: list[Tensor], cfg: OptimConfig | None = None):
        self.params = list(params)
        self.cfg = cfg if cfg is not None else OptimConfig()
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float, extra_grads: dict[int, np.ndarray] | None = None) -> None:
        """Apply one update from each param's ``.grad`` (plus optional additive terms)."""
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if extra_grads is not None and id(p) in extra_grads:
                g = g + extra_grads[id(p)]
            p.data, self.m[i], self.v[i] = adam_step(
                p.data, g, self.m[i], self.v[i], self.t, lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps
            )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(len(self.params)):
            out[f"m{i}"] = self.m[i]
            out[f"v{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for i in range(len(self.params)):
            self.m[i] = np.ascontiguousarray(arrays[f"m{i}"], dtype=self.m[i].dtype)
            self.v[i] = np.ascontiguousarray(arrays[f"v{i}"], dtype=self.v[i].dtype)
        self.t = t


# ---------------------------------------------------------------------------
# shared loop machinery
# ---------------------------------------------------------------------------


def _batch_order(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo : lo + batch_size]


def params_hash(params: list[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()


def _uniform_probs(batch: int, num_branches: int) -> np.ndarray:
    return np.full((batch, num_branches), 1.0 / num_branches, dtype=np.float32)


def _srste_extra_grads(net: RestorationNet, p_mean: np.ndarray, lambda_w: float) -> dict[int, np.ndarray]:
    """Per-weight decay gradients lambda_w * sum_i p_i * (1-mask_i) * W."""
    extra: dict[int, np.ndarray] = {}
    if lambda_w == 0:
        return extra
    for i in range(len(net.branches)):
        for li, mask in net.last_masks.get(i, {}).items():
            w = net.conv_w[li]
            term = (lambda_w * float(p_mean[i])) * ((~mask.bits) * w.data)
            if id(w) in extra:
                extra[id(w)] = extra[id(w)] + term
            else:
                extra[id(w)] = term
    return extra


def _log_row(stage, epoch, lr, num_classes, lw=None, le=None, lc=None, lf=None, mean_p=None, acc=None):
    row = {
        "epoch": epoch,
        "stage": stage,
        "lr": lr,
        "loss_w": lw,
        "loss_e": le,
        "loss_c": lc,
        "loss_f": lf,
        "classifier_accuracy": acc,
    }
    for i in range(num_classes):
        row[f"mean_p_{i}"] = None if mean_p is None else float(mean_p[i])
    return row


def write_log_csv(path, rows: list[dict], num_classes: int) -> None:
    cols = ["epoch", "stage", "lr", "loss_w", "loss_e", "loss_c", "loss_f"]
    cols += [f"mean_p_{i}" for i in range(num_classes)]
    cols += ["classifier_accuracy"]
    lines = [",".join(cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row.get(c)
            if v is None:
                cells.append("")
            elif isinstance(v, int):
                cells.append(str(v))
            else:
                cells.append(f"{v:.8g}")
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------


def stage1_pretrain(
    classifier: Classifier,
    data,
    stage: StageConfig,
    optim: OptimConfig,
    rng: np.random.Generator,
    log: list | None = None,
) -> list[dict]:
    """Cross-entropy pretraining of the classifier on pseudo labels."""
    log = log if log is not None else []
    n = len(data)
    opt = Adam(classifier.parameters(), optim)
    steps_per_epoch = math.ceil(n / stage.batch_size)
    total = max(stage.epochs * steps_per_epoch, 1)
    L = classifier.config.num_classes
    step = 0
    for epoch in range(stage.epochs):
        correct = 0
        loss_sum = 0.0
        p_sum = np.zeros(L)
        for idx in _batch_order(n, stage.batch_size, rng):
            y = Tensor(data.degraded[idx])
            labels = data.labels[idx]
            probs, logits = classifier.forward(y, mode="train")
            loss = cross_entropy(logits, labels)
            zero_grads(classifier.parameters())
            backward(loss)
            lr = cosine_lr(step, total, stage.lr_max, stage.lr_min)
            opt.step(lr)
            step += 1
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
            loss_sum += loss.item() * len(idx)
            p_sum += probs.data.sum(axis=0)
        log.append(
            _log_row("1", epoch, cosine_lr(step - 1, total, stage.lr_max, stage.lr_min), L,
                     lf=loss_sum / n, mean_p=p_sum / n, acc=correct / n)
        )
    return log


def classifier_accuracy(classifier: Classifier, data, batch_size: int = 64) -> float:
    """Eval-mode argmax accuracy against pseudo labels."""
    n = len(data)
    correct = 0
    for lo in range(0, n, batch_size):
        y = Tensor(data.degraded[lo : lo + batch_size])
        probs, _ = classifier.forward(y, mode="eval")
        correct += int((np.argmax(probs.data, axis=1) == data.labels[lo : lo + batch_size]).sum())
    return correct / n


def stage2_train(
    classifier: Classifier | None,
    net: RestorationNet,
    data,
    stage: StageConfig,
    optim: OptimConfig,
    lambda_w: float,
    rng: np.random.Generator,
    log: list | None = None,
) -> list[dict]:
    """Train the restoration branches under a frozen classifier.

    The classifier runs in eval mode and its outputs are detached; a hash
    check asserts its parameters are bit-identical afterwards. With no
    classifier (singleton branch sets) the weighting is uniform.
    """
    log = log if log is not None else []
    n = len(data)
    L = len(net.branches)
    frozen_hash = None
    if classifier is not None:
        zero_grads(classifier.parameters())
        frozen_hash = params_hash(classifier.parameters())
    opt = Adam(net.parameters(), optim)
    steps_per_epoch = math.ceil(n / stage.batch_size)
    total = max(stage.epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(stage.epochs):
        lw_sum = 0.0
        acc_sum = 0.0
        p_sum = np.zeros(L)
        for idx in _batch_order(n, stage.batch_size, rng):
            y = Tensor(data.degraded[idx])
            x = Tensor(data.clean[idx])
            if classifier is not None:
                probs, _ = classifier.forward(y, mode="eval")
                p_data = probs.data
            else:
                p_data = _uniform_probs(len(idx), L)
            outputs = net.forward_all(y, mode="train")
            loss = weighted_l1(Tensor(p_data), outputs, x)
            zero_grads(net.parameters())
            backward(loss)
            if classifier is not None:
                for p in classifier.parameters():
                    if p.grad is not None:
                        raise ContractError("frozen classifier accumulated gradients in stage 2")
            p_mean = p_data.mean(axis=0)
            extra = _srste_extra_grads(net, p_mean, lambda_w)
            lr = cosine_lr(step, total, stage.lr_max, stage.lr_min)
            opt.step(lr, extra)
            step += 1
            lw_sum += loss.item() * len(idx)
            p_sum += p_data.sum(axis=0)
            acc_sum += int((np.argmax(p_data, axis=1) == data.labels[idx]).sum())
        log.append(
            _log_row("2", epoch, cosine_lr(step - 1, total, stage.lr_max, stage.lr_min), L,
                     lw=lw_sum / n, lf=lw_sum / n, mean_p=p_sum / n, acc=acc_sum / n)
        )
    if classifier is not None and params_hash(classifier.parameters()) != frozen_hash:
        raise ContractError("classifier parameters changed during stage 2")
    return log


def stage3_finetune(
    classifier: Classifier,
    net: RestorationNet,
    data,
    stage: StageConfig,
    optim: OptimConfig,
    weights: LossWeights,
    lambda_w: float,
    rng: np.random.Generator,
    log: list | None = None,
    stage_tag: str = "3",
    train_classifier: bool = True,
    train_restoration: bool = True,
) -> list[dict]:
    """Joint finetuning on the combined loss; gradients reach the classifier
    both through the probability weighting of the reconstruction term and
    through the entropy/cost terms."""
    log = log if log is not None else []
    n = len(data)
    L = len(net.branches)
    costs = np.asarray([b.cost for b in net.branches], dtype=np.float64)
    cls_opt = Adam(classifier.parameters(), optim) if train_classifier else None
    net_opt = Adam(net.parameters(), optim) if train_restoration else None
    all_params = classifier.parameters() + net.parameters()
    steps_per_epoch = math.ceil(n / stage.batch_size)
    total = max(stage.epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(stage.epochs):
        sums = np.zeros(4)
        acc_sum = 0.0
        p_sum = np.zeros(L)
        for idx in _batch_order(n, stage.batch_size, rng):
            y = Tensor(data.degraded[idx])
            x = Tensor(data.clean[idx])
            probs, _ = classifier.forward(y, mode="train")
            outputs = net.forward_all(y, mode="train")
            lw = weighted_l1(probs, outputs, x)
            le = entropy_loss(probs)
            lc = cost_loss(probs, costs)
            lf = final_loss(lw, le, lc, weights)
            zero_grads(all_params)
            backward(lf)
            p_mean = probs.data.mean(axis=0)
            lr = cosine_lr(step, total, stage.lr_max, stage.lr_min)
            if net_opt is not None:
                net_opt.step(lr, _srste_extra_grads(net, p_mean, lambda_w))
            if cls_opt is not None:
                cls_opt.step(lr)
            step += 1
            w = len(idx)
            sums += w * np.array([lw.item(), le.item(), lc.item(), lf.item()])
            p_sum += probs.data.sum(axis=0)
            acc_sum += int((np.argmax(probs.data, axis=1) == data.labels[idx]).sum())
        log.append(
            _log_row(stage_tag, epoch, cosine_lr(step - 1, total, stage.lr_max, stage.lr_min), L,
                     lw=sums[0] / n, le=sums[1] / n, lc=sums[2] / n, lf=sums[3] / n,
                     mean_p=p_sum / n, acc=acc_sum / n)
        )
    return log


def train_from_scratch(
    classifier: Classifier,
    net: RestorationNet,
    data,
    stage: StageConfig,
    optim: OptimConfig,
    weights: LossWeights,
    lambda_w: float,
    rng: np.random.Generator,
    log: list | None = None,
) -> list[dict]:
    """Ablation baseline: optimize the combined loss end to end from random
    init, skipping pretraining and the frozen-classifier stage."""
    return stage3_finetune(
        classifier, net, data, stage, optim, weights, lambda_w, rng, log, stage_tag="scratch"
    )


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def save_checkpoint(
    directory,
    *,
    net: RestorationNet | None = None,
    classifier: Classifier | None = None,
    optimizers: dict[str, Adam] | None = None,
    rng: np.random.Generator | None = None,
    meta: dict | None = None,
) -> None:
    """Write a checkpoint directory: manifest.json + one NMT1 file per array."""
    if net is None and classifier is None:
        raise ContractError("a checkpoint needs at least one model")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    if net is not None:
        for name, a in net.state_dict().items():
            tensors[f"net.{name}"] = a
    if classifier is not None:
        for name, a in classifier.state_dict().items():
            tensors[f"cls.{name}"] = a
    opt_meta = {}
    if optimizers:
        for oname, opt in optimizers.items():
            opt_meta[oname] = {"t": opt.t, "count": len(opt.params)}
            for aname, a in opt.state_arrays().items():
                tensors[f"opt.{oname}.{aname}"] = a
    manifest = {
        "meta": meta or {},
        "net": None
        if net is None
        else {
            "depth": net.depth,
            "width": net.width,
            "in_channels": net.in_channels,
            "kernel_size": net.kernel_size,
            "residual": net.residual,
            "mask_first_last": net.mask_first_last,
            "shared_bn": net.shared_bn,
            "masked_layers": list(net.masked_layers),
            "branches": [
                {"n": b.pattern.n, "m": b.pattern.m, "cost": b.cost, "bn_bank_index": b.bn_bank_index}
                for b in net.branches
            ],
        },
        "classifier": None
        if classifier is None
        else {
            "num_classes": classifier.config.num_classes,
            "block_channels": list(classifier.config.block_channels),
            "kernel_size": classifier.config.kernel_size,
            "stride_per_block": classifier.config.stride_per_block,
            "in_channels": classifier.config.in_channels,
        },
        "optimizers": opt_meta,
        "rng_state": _rng_state(rng) if rng is not None else None,
        "tensors": sorted(tensors),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name, a in tensors.items():
        write_tensor(d / f"{name}.nmt", np.asarray(a))


def load_checkpoint(directory):
    """Rebuild (classifier, net, optimizers, rng, meta) from a checkpoint."""
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: not a checkpoint (no manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    tensors = {name: read_tensor(d / f"{name}.nmt") for name in manifest["tensors"]}

    net = None
    if manifest["net"] is not None:
        ncfg = manifest["net"]
        branches = [
            BranchSpec(pattern=NmPattern(b["n"], b["m"]), cost=b["cost"], bn_bank_index=b["bn_bank_index"])
            for b in ncfg["branches"]
        ]
        net = RestorationNet(
            rng=np.random.default_rng(0),
            depth=ncfg["depth"],
            width=ncfg["width"],
            in_channels=ncfg["in_channels"],
            kernel_size=ncfg["kernel_size"],
            branches=branches,
            residual=ncfg["residual"],
            mask_first_last=ncfg["mask_first_last"],
            shared_bn=ncfg["shared_bn"],
        )
        net.load_state_dict({k[len("net.") :]: v for k, v in tensors.items() if k.startswith("net.")})

    classifier = None
    if manifest["classifier"] is not None:
        ccfg = manifest["classifier"]
        classifier = Classifier(
            ClassifierConfig(
                num_classes=ccfg["num_classes"],
                block_channels=tuple(ccfg["block_channels"]),
                kernel_size=ccfg["kernel_size"],
                stride_per_block=ccfg["stride_per_block"],
                in_channels=ccfg["in_channels"],
            ),
            rng=np.random.default_rng(0),
        )
        classifier.load_state_dict({k[len("cls.") :]: v for k, v in tensors.items() if k.startswith("cls.")})

    optimizers: dict[str, Adam] = {}
    for oname, ometa in manifest.get("optimizers", {}).items():
        owner = classifier if oname == "classifier" else net
        if owner is None:
            raise FormatError(f"optimizer {oname!r} has no matching model in checkpoint")
        opt = Adam(owner.parameters())
        arrays = {
            k[len(f"opt.{oname}.") :]: v for k, v in tensors.items() if k.startswith(f"opt.{oname}.")
        }
        opt.load_state_arrays(arrays, ometa["t"])
        optimizers[oname] = opt

    rng = _rng_from_state(manifest["rng_state"]) if manifest.get("rng_state") else None
    return classifier, net, optimizers, rng, manifest.get("meta", {})
