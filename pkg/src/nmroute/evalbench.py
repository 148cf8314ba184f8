"""Quality metrics, routing/FLOPs accounting, kernel benchmarks, reports.

The evaluation contract mirrors test-time behaviour: the classifier picks
exactly one branch per sample (argmax), that branch runs through the
compressed kernel path, and the report accounts average FLOPs as

    classifier_flops + sum_i fraction_i * branch_flops_i.

Benchmarks measure wall-clock for dense / masked-dense / compressed matmul
and always verify numerical equivalence, but never gate on speedup: CPU
timing is platform noise, correctness is not.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import Classifier, classifier_flops, predict_class
from .errors import ContractError, ShapeError
from .restoration import RestorationNet
from .sparsity import NmPattern, compress, compute_mask, matmul_compressed
from .tensor import Tensor

# ---------------------------------------------------------------------------
# image quality metrics
# ---------------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of a 2-D image with a 1-D window."""
    k = len(win)
    tmp = np.lib.stride_tricks.sliding_window_view(img, k, axis=1) @ win
    return np.lib.stride_tricks.sliding_window_view(tmp, k, axis=0) @ win


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0, win_size: int = 11, win_sigma: float = 1.5) -> float:
    """Structural similarity with a Gaussian window (K1=0.01, K2=0.03).

    Accepts (H, W) or (C, H, W); channel results are averaged. Windows are
    valid-mode, so inputs must be at least ``win_size`` on each side.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects (H,W) or (C,H,W), got {a.shape}")
    if a.shape[1] < win_size or a.shape[2] < win_size:
        raise ShapeError(f"ssim needs at least {win_size}px images, got {a.shape[1]}x{a.shape[2]}")
    win = _gaussian_window(win_size, win_sigma)
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    vals = []
    for c in range(a.shape[0]):
        xa, xb = a[c], b[c]
        mu_a = _filter_valid(xa, win)
        mu_b = _filter_valid(xb, win)
        var_a = _filter_valid(xa * xa, win) - mu_a * mu_a
        var_b = _filter_valid(xb * xb, win) - mu_b * mu_b
        cov = _filter_valid(xa * xb, win) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-tier quality and routing/FLOPs accounting for one model."""

    num_classes: int
    branch_names: list[str]
    tiers: list[int]
    # variant -> tier -> (psnr, ssim, count); variant "all" aggregates
    metrics: dict = field(default_factory=dict)
    routing_fractions: list[float] = field(default_factory=list)
    branch_flops: list[float] = field(default_factory=list)
    dense_flops: float = 0.0
    classifier_flops: float = 0.0
    average_flops: float = 0.0
    net_params: int = 0
    classifier_params: int = 0
    per_sample: dict = field(default_factory=dict)

    @property
    def flops_fraction(self) -> float:
        return self.average_flops / self.dense_flops if self.dense_flops else float("nan")

    def check_identities(self) -> None:
        if abs(sum(self.routing_fractions) - 1.0) > 1e-9:
            raise ContractError("routing histogram does not sum to 1")
        expect = self.classifier_flops + sum(
            f * fl for f, fl in zip(self.routing_fractions, self.branch_flops)
        )
        if not math.isclose(expect, self.average_flops, rel_tol=1e-12, abs_tol=1e-6):
            raise ContractError("average FLOPs identity violated")

    def to_rows(self) -> list[dict]:
        rows = []
        for variant, tiers in self.metrics.items():
            for tier, (p, s, cnt) in tiers.items():
                rows.append(
                    {"variant": variant, "tier": tier, "count": cnt, "psnr_db": p, "ssim": s, "fraction": ""}
                )
        for i, name in enumerate(self.branch_names):
            rows.append(
                {
                    "variant": f"routing_fraction[{name}]",
                    "tier": "all",
                    "count": "",
                    "psnr_db": "",
                    "ssim": "",
                    "fraction": self.routing_fractions[i],
                }
            )
        summary = {
            "average_flops": self.average_flops,
            "dense_flops": self.dense_flops,
            "classifier_flops": self.classifier_flops,
            "flops_fraction": self.flops_fraction,
            "net_params": self.net_params,
            "classifier_params": self.classifier_params,
        }
        for key, val in summary.items():
            rows.append({"variant": key, "tier": "all", "count": "", "psnr_db": "", "ssim": "", "fraction": val})
        return rows


def _fmt(v) -> str:
    if v == "" or v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    f = float(v)
    if math.isinf(f):
        return "inf"
    return f"{f:.6f}"


def write_report_csv(path, report: EvalReport) -> None:
    cols = ["variant", "tier", "count", "psnr_db", "ssim", "fraction"]
    lines = [",".join(cols)]
    for row in report.to_rows():
        lines.append(",".join(_fmt(row[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def _mean_metrics(ps, ss):
    return (float(np.mean(ps)) if len(ps) else float("nan"), float(np.mean(ss)) if len(ss) else float("nan"))


def evaluate(
    classifier: Classifier | None,
    net: RestorationNet,
    data,
    batch_size: int = 16,
    forced_branch: int | None = None,
    kernel: str = "compressed",
) -> EvalReport:
    """Route every sample through one branch and report quality/FLOPs.

    Also evaluates every fixed branch on every sample (the routed output is
    taken from the branch the sample was routed to, so routed quality always
    lies between the per-tier branch extremes). ``forced_branch`` bypasses
    the classifier, as does a singleton branch set.
    """
    n = len(data)
    L = len(net.branches)
    hw = (data.degraded.shape[2], data.degraded.shape[3])
    names = [str(b.pattern) for b in net.branches]

    if forced_branch is None and classifier is None and L > 1:
        raise ContractError("need a classifier or a forced branch for multi-branch routing")

    branch_psnr = np.zeros((L, n))
    branch_ssim = np.zeros((L, n))
    routed_idx = np.zeros(n, dtype=np.int64)
    input_psnr = np.zeros(n)
    input_ssim = np.zeros(n)

    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        y = Tensor(data.degraded[lo:hi])
        if forced_branch is not None:
            routed_idx[lo:hi] = forced_branch
        elif L == 1:
            routed_idx[lo:hi] = 0
        else:
            probs, _ = classifier.forward(y, mode="eval")
            routed_idx[lo:hi] = predict_class(probs)
        for i in range(L):
            out = net.forward_branch(y, i, mode="eval", kernel=kernel).data
            out = np.clip(out, 0.0, 1.0)
            for j in range(hi - lo):
                branch_psnr[i, lo + j] = psnr(out[j], data.clean[lo + j])
                branch_ssim[i, lo + j] = ssim(out[j], data.clean[lo + j])
        for j in range(lo, hi):
            input_psnr[j] = psnr(data.degraded[j], data.clean[j])
            input_ssim[j] = ssim(data.degraded[j], data.clean[j])

    routed_psnr = branch_psnr[routed_idx, np.arange(n)]
    routed_ssim = branch_ssim[routed_idx, np.arange(n)]

    tiers = sorted(int(t) for t in np.unique(data.labels))
    metrics: dict = {}

    def fill(variant, ps, ss):
        metrics[variant] = {}
        for t in tiers:
            sel = data.labels == t
            metrics[variant][str(t)] = (*_mean_metrics(ps[sel], ss[sel]), int(sel.sum()))
        metrics[variant]["all"] = (*_mean_metrics(ps, ss), n)

    fill("input", input_psnr, input_ssim)
    fill("routed", routed_psnr, routed_ssim)
    for i, name in enumerate(names):
        fill(f"branch_{name}", branch_psnr[i], branch_ssim[i])

    fractions = [float((routed_idx == i).mean()) for i in range(L)]
    bflops = [net.branch_flops(i, hw) for i in range(L)]
    cflops = 0.0
    cparams = 0
    if classifier is not None and forced_branch is None and L > 1:
        cflops = classifier_flops(classifier.config, hw)
        cparams = classifier.parameter_count()
    avg = cflops + sum(f * fl for f, fl in zip(fractions, bflops))

    report = EvalReport(
        num_classes=L,
        branch_names=names,
        tiers=tiers,
        metrics=metrics,
        routing_fractions=fractions,
        branch_flops=bflops,
        dense_flops=net.dense_flops(hw),
        classifier_flops=cflops,
        average_flops=avg,
        net_params=net.parameter_count(),
        classifier_params=classifier.parameter_count() if classifier is not None else 0,
        per_sample={
            "branch_psnr": branch_psnr,
            "branch_ssim": branch_ssim,
            "routed_idx": routed_idx,
            "labels": data.labels.copy(),
            "input_psnr": input_psnr,
        },
    )
    report.check_identities()
    return report


# ---------------------------------------------------------------------------
# kernel benchmarks
# ---------------------------------------------------------------------------


def bench_kernels(sizes, patterns, repeats: int = 11, rng: np.random.Generator | None = None) -> list[dict]:
    """Median wall-clock of dense vs masked-dense vs compressed matmul.

    Every run first verifies that all three kernels agree within 1e-4; a
    disagreement raises instead of producing a timing row.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    rows = []
    for size in sizes:
        w = rng.standard_normal((size, size)).astype(np.float32)
        x = rng.standard_normal((size, size)).astype(np.float32)
        dense_bytes = w.nbytes
        for pat in patterns:
            pattern = pat if isinstance(pat, NmPattern) else NmPattern(*pat)
            mask = compute_mask(w, pattern)
            comp = compress(w, mask)
            wm = w * mask.bits

            ref = wm @ x
            got = matmul_compressed(comp, x)
            err = float(np.max(np.abs(ref - got)))
            if err > 1e-4:
                raise ContractError(f"kernel equivalence gate failed at {size} {pattern}: {err}")

            def timed(fn):
                ts = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    fn()
                    ts.append(time.perf_counter() - t0)
                return float(np.median(ts) * 1e3)

            t_dense = timed(lambda: w @ x)
            t_masked = timed(lambda: wm @ x)
            t_comp = timed(lambda: matmul_compressed(comp, x))
            vbytes, ibytes = comp.storage_bytes()
            rows.append(
                {
                    "size": size,
                    "pattern": str(pattern),
                    "dense_ms": t_dense,
                    "masked_ms": t_masked,
                    "compressed_ms": t_comp,
                    "speedup_compressed_vs_dense": t_dense / t_comp if t_comp else float("nan"),
                    "max_abs_err": err,
                    "dense_bytes": dense_bytes,
                    "values_bytes": vbytes,
                    "index_bytes": ibytes,
                }
            )
    return rows


def write_bench_csv(path, rows: list[dict]) -> None:
    cols = [
        "size",
        "pattern",
        "dense_ms",
        "masked_ms",
        "compressed_ms",
        "speedup_compressed_vs_dense",
        "max_abs_err",
        "dense_bytes",
        "values_bytes",
        "index_bytes",
    ]
    lines = [",".join(cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(str(v) if isinstance(v, (int, str)) else f"{v:.6g}")
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# SVG line plots (probability curves, PSNR-vs-FLOPs)
# ---------------------------------------------------------------------------

_SVG_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def write_line_svg(path, series: dict[str, list[float]], title: str, xlabel: str, ylabel: str,
                   width: int = 640, height: int = 400) -> None:
    """Minimal deterministic SVG polyline chart (no plotting dependencies)."""
    ml, mr, mt, mb = 60, 150, 40, 45
    pw, ph = width - ml - mr, height - mt - mb
    all_y = [v for vals in series.values() for v in vals if not math.isnan(v)]
    n = max((len(v) for v in series.values()), default=0)
    y_lo = min(all_y) if all_y else 0.0
    y_hi = max(all_y) if all_y else 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(i):
        return ml + (pw * i / max(n - 1, 1))

    def sy(v):
        return mt + ph * (1.0 - (v - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="15" y="{mt + ph / 2:.1f}" font-size="11" transform="rotate(-90 15 {mt + ph / 2:.1f})" '
        f'text-anchor="middle">{ylabel}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
    ]
    for k in range(5):
        yv = y_lo + (y_hi - y_lo) * k / 4
        yy = sy(yv)
        parts.append(f'<line x1="{ml}" y1="{yy:.1f}" x2="{ml + pw}" y2="{yy:.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{ml - 6}" y="{yy + 4:.1f}" text-anchor="end" font-size="10">{yv:.3g}</text>')
    for si, (name, vals) in enumerate(series.items()):
        color = _SVG_COLORS[si % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(vals) if not math.isnan(v))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = mt + 16 + 16 * si
        parts.append(f'<line x1="{ml + pw + 8}" y1="{ly}" x2="{ml + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw + 32}" y="{ly + 4}" font-size="11">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def write_scatter_svg(path, points: dict[str, tuple[float, float]], title: str, xlabel: str, ylabel: str,
                      width: int = 640, height: int = 400) -> None:
    """Labeled scatter (e.g. FLOPs fraction vs PSNR per variant)."""
    ml, mr, mt, mb = 60, 30, 40, 45
    pw, ph = width - ml - mr, height - mt - mb
    xs = [p[0] for p in points.values()]
    ys = [p[1] for p in points.values()]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_hi = x_hi if x_hi > x_lo else x_lo + 1
    y_hi = y_hi if y_hi > y_lo else y_lo + 1
    xpad, ypad = 0.08 * (x_hi - x_lo), 0.08 * (y_hi - y_lo)
    x_lo, x_hi, y_lo, y_hi = x_lo - xpad, x_hi + xpad, y_lo - ypad, y_hi + ypad

    def sx(v):
        return ml + pw * (v - x_lo) / (x_hi - x_lo)

    def sy(v):
        return mt + ph * (1.0 - (v - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="15" y="{mt + ph / 2:.1f}" font-size="11" transform="rotate(-90 15 {mt + ph / 2:.1f})" '
        f'text-anchor="middle">{ylabel}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
    ]
    for si, (name, (xv, yv)) in enumerate(points.items()):
        color = _SVG_COLORS[si % len(_SVG_COLORS)]
        parts.append(f'<circle cx="{sx(xv):.2f}" cy="{sy(yv):.2f}" r="4" fill="{color}"/>')
        parts.append(f'<text x="{sx(xv) + 6:.2f}" y="{sy(yv) - 6:.2f}" font-size="10">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
