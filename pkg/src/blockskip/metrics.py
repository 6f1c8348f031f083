"""Cost accounting, wall-clock timing, two-sample quality, mask reports.

MAC counts cover the dense multiplies of each block (layer norms,
activations, and residual adds are not counted); the per-step overhead is the
input and output projections plus the embedding add, which always execute.
Sample quality is scored with the unbiased squared maximum mean discrepancy
under an RBF kernel, with a permutation-calibrated noise floor standing in
for large-scale perceptual metrics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .diffusion import NoiseSchedule, sample_chain
from .executor import ExecutionStats, MaskMatrix, run_masked_chain
from .model import BLOCK_ATTN, BlockChainModel
from .seeds import stream


@dataclass
class CostModel:
    block_macs: np.ndarray   # float64 [B]
    overhead: float          # per-step MACs outside the maskable blocks

    def baseline_total(self, steps: int) -> float:
        return float(steps * (self.block_macs.sum() + self.overhead))


def block_macs(model: BlockChainModel) -> CostModel:
    """Dense-multiply counts per block and per step, from layer dimensions.

    A dense layer k -> n applied to L tokens costs L*k*n. An attention block
    adds its four projections (4*L*w*w) and the score and mixing products
    (2*L*L*w).
    """
    spec = model.spec
    tokens = spec.tokens or 1
    w, h = spec.width, spec.hidden
    per_block = []
    for kind in spec.block_kinds:
        if kind == BLOCK_ATTN:
            per_block.append(4.0 * tokens * w * w + 2.0 * tokens * tokens * w)
        else:
            per_block.append(tokens * w * h + tokens * h * w)
    overhead = tokens * spec.patch_dim * w + tokens * w * spec.patch_dim
    return CostModel(block_macs=np.asarray(per_block, dtype=np.float64),
                     overhead=float(overhead))


def mask_cost(mask: MaskMatrix, cost: CostModel) -> tuple[float, float]:
    """Total masked MACs and the MAC-ratio speedup over the dense baseline."""
    if mask.num_blocks != len(cost.block_macs):
        raise ValueError(f"mask has {mask.num_blocks} blocks, cost model has "
                         f"{len(cost.block_macs)}")
    total = float(mask.num_steps * cost.overhead
                  + (mask.binary * cost.block_macs).sum())
    return total, cost.baseline_total(mask.num_steps) / total


def speedup_from_macs(baseline: float, masked: float) -> float:
    return float(baseline) / float(masked)


# -- wall clock ----------------------------------------------------------------


def wall_clock(model: BlockChainModel, mask: MaskMatrix | None, schedule: NoiseSchedule,
               seed: int = 0, repetitions: int = 30, batch: int = 16,
               mode: str = "ddim", warmup: int = 3) -> dict:
    """Median and IQR of full-chain latency, masked and unmasked.

    The two variants are timed in alternation so load drift on the host hits
    both sides alike.
    """
    noise = stream(seed, "timing-noise").standard_normal(
        (batch, model.data_dim)).astype(np.float32)

    def run_masked():
        run_masked_chain(model, noise, mask, schedule, mode=mode)

    def run_plain():
        sample_chain(model, noise, schedule, mode=mode)

    runners = {"unmasked": run_plain}
    if mask is not None:
        runners["masked"] = run_masked
    samples: dict[str, list[float]] = {name: [] for name in runners}
    for _ in range(warmup):
        for fn in runners.values():
            fn()
    for _ in range(repetitions):
        for name, fn in runners.items():
            start = time.perf_counter()
            fn()
            samples[name].append(time.perf_counter() - start)

    result = {}
    for name, times in samples.items():
        q1, q3 = np.percentile(times, [25, 75])
        result[name] = {"median_s": float(np.median(times)), "iqr_s": float(q3 - q1),
                        "repetitions": repetitions}
    if mask is not None:
        result["speedup_wallclock"] = (result["unmasked"]["median_s"]
                                       / result["masked"]["median_s"])
    return result


# -- maximum mean discrepancy -----------------------------------------------------


def _rbf(sq_dists: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-sq_dists / (2.0 * bandwidth * bandwidth))


def median_heuristic_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Bandwidth whose kernel argument is -1 at the pooled median squared
    distance."""
    pooled = np.concatenate([a, b], axis=0)
    sq = cdist(pooled, pooled, "sqeuclidean")
    upper = sq[np.triu_indices_from(sq, k=1)]
    med = float(np.median(upper))
    if med <= 0.0:
        med = 1.0
    return float(np.sqrt(med / 2.0))


def mmd(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD estimate with an RBF kernel.

    Same-distribution inputs fluctuate around zero (slightly negative values
    are expected from the unbiased estimator).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"sample sets must be 2-d with equal dimension, got {a.shape}, {b.shape}")
    if bandwidth is None:
        bandwidth = median_heuristic_bandwidth(a, b)
    m, n = len(a), len(b)
    kxx = _rbf(cdist(a, a, "sqeuclidean"), bandwidth)
    kyy = _rbf(cdist(b, b, "sqeuclidean"), bandwidth)
    kxy = _rbf(cdist(a, b, "sqeuclidean"), bandwidth)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def mmd_permutation_threshold(a: np.ndarray, b: np.ndarray, permutations: int = 200,
                              quantile: float = 0.95, seed: int = 0,
                              bandwidth: float | None = None) -> float:
    """Null-distribution quantile of the MMD between random re-splits of the
    pooled samples; the detection floor below which two sets are
    indistinguishable."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if bandwidth is None:
        bandwidth = median_heuristic_bandwidth(a, b)
    pooled = np.concatenate([a, b], axis=0)
    kernel = _rbf(cdist(pooled, pooled, "sqeuclidean"), bandwidth)
    m, n = len(a), len(b)
    rng = stream(seed, "mmd-permutation")
    values = np.empty(permutations)
    for i in range(permutations):
        perm = rng.permutation(m + n)
        pa, pb = perm[:m], perm[m:]
        kxx = kernel[np.ix_(pa, pa)]
        kyy = kernel[np.ix_(pb, pb)]
        kxy = kernel[np.ix_(pa, pb)]
        tx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        ty = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        values[i] = tx + ty - 2.0 * kxy.mean()
    return float(np.quantile(values, quantile))


def feature_distortion(masked_features: list[np.ndarray],
                       reference_features: list[np.ndarray]) -> np.ndarray:
    """Per-step relative end-feature distortion between two trajectories."""
    out = np.empty(len(masked_features))
    for i, (got, want) in enumerate(zip(masked_features, reference_features)):
        ref = np.sqrt((want.astype(np.float64) ** 2).sum())
        diff = np.sqrt(((got.astype(np.float64) - want.astype(np.float64)) ** 2).sum())
        out[i] = diff / max(ref, np.finfo(np.float64).tiny)
    return out


@dataclass
class QualityReport:
    """Sample-quality measurements for one masked configuration.

    The MMD values come from the unbiased estimator, so same-distribution
    comparisons fluctuate around zero and may dip slightly negative; the
    floor below is the estimator's worst case at the minimum supported set
    size (100 samples).
    """

    mmd_masked_vs_baseline: float | None = None
    mmd_baseline_pair: float | None = None
    mmd_noise_floor: float | None = None
    distortion_per_step: np.ndarray | None = None  # indexed by schedule step

    _MMD_NEGATIVE_TOLERANCE = -0.02

    def validate(self) -> None:
        for name in ("mmd_masked_vs_baseline", "mmd_baseline_pair", "mmd_noise_floor"):
            value = getattr(self, name)
            if value is not None and value < self._MMD_NEGATIVE_TOLERANCE:
                raise ValueError(f"{name}={value} below the unbiased-estimator tolerance")
        if self.distortion_per_step is not None and np.any(self.distortion_per_step < 0):
            raise ValueError("feature distortion must be nonnegative")

    def write_distortion_csv(self, path) -> Path:
        out = Path(path)
        lines = ["t,distortion"]
        for t, value in enumerate(self.distortion_per_step):
            lines.append(f"{t},{value:.9g}")
        out.write_text("\n".join(lines) + "\n")
        return out


# -- mask analysis exports ----------------------------------------------------------


def near_binary_fraction(scores: np.ndarray, tol: float = 0.1) -> float:
    """Fraction of scores within ``tol`` of 0 or 1."""
    flat = np.asarray(scores, dtype=np.float64).ravel()
    return float(np.mean(np.abs(flat - np.round(flat)) < tol))


def score_histogram(scores: np.ndarray, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(np.asarray(scores).ravel(), bins=bins, range=(0.0, 1.0))
    return counts, edges


def mask_report(mask: MaskMatrix, stats: ExecutionStats | None, out_dir,
                window: int = 5, bins: int = 20) -> dict[str, Path]:
    """Write the heatmap, histogram, and per-step sparsity tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    computed = (stats.computed.astype(int) if stats is not None
                else mask.binary.astype(int))
    steps, blocks = computed.shape

    heatmap = out / "heatmap.csv"
    header = "t_start,t_end," + ",".join(f"b{b}" for b in range(blocks))
    lines = [header]
    for start in range(0, steps, window):
        end = min(start + window, steps)
        counts = computed[start:end].sum(axis=0)
        lines.append(f"{start},{end - 1}," + ",".join(str(int(c)) for c in counts))
    heatmap.write_text("\n".join(lines) + "\n")

    histogram = out / "histogram.csv"
    counts, edges = score_histogram(mask.scores, bins=bins)
    lines = ["bin_low,bin_high,count"]
    for i, c in enumerate(counts):
        lines.append(f"{edges[i]:.4f},{edges[i + 1]:.4f},{int(c)}")
    histogram.write_text("\n".join(lines) + "\n")

    sparsity = out / "sparsity.csv"
    lines = ["t,zeros,ones,sparsity"]
    for t in range(steps):
        ones = int(mask.binary[t].sum())
        zeros = blocks - ones
        lines.append(f"{t},{zeros},{ones},{zeros / blocks:.6f}")
    sparsity.write_text("\n".join(lines) + "\n")

    return {"heatmap": heatmap, "histogram": histogram, "sparsity": sparsity}
