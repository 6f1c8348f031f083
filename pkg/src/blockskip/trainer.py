"""Per-timestep optimization of continuous block-skipping scores.

The frozen teacher walks its reverse chain once; at each step the score row
for that step alone is optimized so the masked step's end feature stays close
to the teacher's, while an L1 term prices computation and a bimodality term
pushes scores toward {0, 1}. The carried state and cache are detached between
steps, so each step owns an isolated gradient graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .diffusion import (NoiseSchedule, TrajectoryRecord, predict_initial,
                        reverse_step, sample_chain)
from .executor import FeatureCache, MaskMatrix, run_masked_step_continuous
from .model import BlockChainModel
from .optim import Adam
from .seeds import stream
from .tensor import Tensor, backward

SAMPLING_MODES = ("continuous", "bernoulli_st", "gumbel_softmax")
TEACHER_INPUTS = ("student_state", "independent_trajectory")

# Logit shift keeping the two-class relaxation finite at scores 0 and 1.
_LOGIT_EPS = 1e-4


class MaskTrainingError(RuntimeError):
    """Mask optimization hit a non-finite loss; carries (t, scores)."""

    def __init__(self, t: int, scores: np.ndarray):
        super().__init__(f"non-finite loss at timestep {t}; scores={scores.tolist()}")
        self.timestep = t
        self.scores = scores


@dataclass
class TrainerConfig:
    lambda1: float = 0.05
    lambda2: float = 0.02
    lr: float = 0.05
    iterations: int = 50
    batch_size: int = 8
    sampling_mode: str = "bernoulli_st"
    tau: float = 1.0
    threshold: float = 0.5
    seed: int = 0
    teacher_input: str = "student_state"
    loss_scaling: bool = True

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization coefficients must be nonnegative")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("binarization threshold must lie in (0, 1)")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode must be one of {SAMPLING_MODES}")
        if self.sampling_mode == "gumbel_softmax" and self.tau <= 0:
            raise ValueError("gumbel_softmax needs tau > 0")
        if self.teacher_input not in TEACHER_INPUTS:
            raise ValueError(f"teacher_input must be one of {TEACHER_INPUTS}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


@dataclass
class TimestepWeights:
    """Relative end-feature change per step and the loss weight it implies.

    The final sampling step has no successor feature, so its change is NaN
    and its weight defaults to 1.
    """

    change: np.ndarray
    weight: np.ndarray

    def write_csv(self, path) -> None:
        lines = ["t,rel_change,weight"]
        for t in range(len(self.change)):
            lines.append(f"{t},{self.change[t]:.9g},{self.weight[t]:.3g}")
        from pathlib import Path
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class LossBreakdown:
    timestep: int
    iteration: int
    feature: float
    sparse: float
    bimodal: float
    weight: float
    lambda1: float
    lambda2: float
    # Composed in float64 from the logged components, so the breakdown
    # identity holds to full double precision.
    total: float = field(init=False)

    def __post_init__(self):
        self.total = (self.feature + self.lambda1 * self.weight * self.sparse
                      + self.lambda2 * self.weight * self.bimodal)


# -- losses -------------------------------------------------------------------


def feature_loss(x_end, x_ori_end) -> Tensor:
    """Euclidean distance between the masked and reference end features."""
    x_end = T.as_tensor(x_end)
    x_ori_end = T.as_tensor(x_ori_end)
    if x_end.shape != x_ori_end.shape:
        raise T.ShapeError(f"feature_loss: shapes {x_end.shape} and {x_ori_end.shape} differ")
    return T.l2_norm(T.sub(x_end, x_ori_end))


def sparse_loss(s_row) -> Tensor:
    """L1 mass of the score row (scores are nonnegative)."""
    return T.sum_all(T.as_tensor(s_row))


def bimodal_loss(s_row) -> Tensor:
    """Sum of s * (1 - s); zero exactly at binary scores."""
    s = T.as_tensor(s_row)
    return T.sum_all(T.mul(s, T.sub(1.0, s)))


def total_loss(feature: Tensor, sparse: Tensor, bimodal: Tensor,
               lambda1: float, lambda2: float, weight: float = 1.0) -> Tensor:
    """feature + lambda1 * w * sparse + lambda2 * w * bimodal."""
    return T.add(feature, T.add(T.mul(float(lambda1 * weight), sparse),
                                T.mul(float(lambda2 * weight), bimodal)))


# -- timestep weighting ---------------------------------------------------------


def teacher_trajectory(model: BlockChainModel, x_start: np.ndarray,
                       schedule: NoiseSchedule, mode: str = "ddim",
                       rng: np.random.Generator | None = None,
                       seed: int | None = None) -> TrajectoryRecord:
    """Unmasked reference chain recording states and end features."""
    _, record = sample_chain(model, x_start, schedule, mode=mode, rng=rng, seed=seed)
    return record


def relative_feature_change(trajectory: TrajectoryRecord) -> np.ndarray:
    """Per-step ||end[t] - end[t-1]|| / ||end[t]||, indexed by schedule step.

    Step t-1 runs after step t, so every step except the final one (t = 0)
    has a defined successor; t = 0 gets NaN.
    """
    steps = len(trajectory)
    if steps < 2:
        raise ValueError("need at least two steps to compute feature change")
    change = np.full(steps, np.nan)
    for t in range(1, steps):
        cur = trajectory.end_feature_at(t).astype(np.float64)
        nxt = trajectory.end_feature_at(t - 1).astype(np.float64)
        norm = np.sqrt((cur * cur).sum())
        if norm == 0.0:
            raise ValueError(f"end feature at step {t} has zero norm")
        change[t] = np.sqrt(((cur - nxt) ** 2).sum()) / norm
    return change


def piecewise_weights(change: np.ndarray) -> np.ndarray:
    """Map relative changes to loss weights 2.0 / 1.5 / 1.0 by the ratio to
    the maximum; undefined entries weigh 1.0."""
    defined = change[np.isfinite(change)]
    weights = np.ones_like(change, dtype=np.float64)
    peak = float(defined.max()) if defined.size else 0.0
    if peak <= 0.0:
        import warnings
        warnings.warn("all feature changes are zero; every loss weight is 1.0")
        return weights
    for t, value in enumerate(change):
        if not np.isfinite(value):
            continue
        ratio = value / peak
        if ratio < 0.1:
            weights[t] = 2.0
        elif ratio < 0.5:
            weights[t] = 1.5
    return weights


def compute_timestep_weights(trajectory: TrajectoryRecord) -> TimestepWeights:
    change = relative_feature_change(trajectory)
    return TimestepWeights(change=change, weight=piecewise_weights(change))


# -- score binarization ----------------------------------------------------------


def binarize(scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strictly-greater thresholding; the first sampling row is forced to 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    binary = (scores > threshold).astype(np.uint8)
    binary[-1] = 1
    return binary


# -- per-timestep optimization -----------------------------------------------------


def _coefficients(s: Tensor, mode: str, tau: float,
                  rng: np.random.Generator | None) -> list[Tensor]:
    """Per-block blend coefficients for one forward pass.

    continuous: the scores themselves. bernoulli_st: a fresh 0/1 sample whose
    gradient passes straight through to the score. gumbel_softmax: the
    two-class relaxation sigmoid((logit(s) + g) / tau) with logistic noise g.
    """
    num = s.shape[0]
    if mode == "continuous":
        return [T.take(s, b) for b in range(num)]
    if rng is None:
        raise ValueError(f"sampling mode {mode} needs an rng")
    if mode == "bernoulli_st":
        draws = (rng.random(num) < s.data).astype(np.float32)
        return [T.add(T.take(s, b), float(draws[b] - s.data[b])) for b in range(num)]
    if mode == "gumbel_softmax":
        u = rng.random(num)
        logistic = np.log(u) - np.log1p(-u)
        out = []
        for b in range(num):
            sb = T.take(s, b)
            logit = T.sub(T.log(T.add(sb, _LOGIT_EPS)),
                          T.log(T.sub(1.0 + _LOGIT_EPS, sb)))
            out.append(T.sigmoid(T.mul(T.add(logit, float(logistic[b])), 1.0 / tau)))
        return out
    raise ValueError(f"unknown sampling mode {mode!r}")


def optimize_timestep(model: BlockChainModel, t: int, s_row: np.ndarray,
                      x_t: np.ndarray, cache: FeatureCache, x_ori_end: np.ndarray,
                      weight: float, config: TrainerConfig,
                      rng: np.random.Generator | None = None,
                      ) -> tuple[np.ndarray, list[LossBreakdown]]:
    """Gradient steps on one score row, projected onto [0, 1] after each
    update. Inputs are values (already detached); the model stays frozen."""
    s = Tensor(np.asarray(s_row, dtype=np.float32).copy(), requires_grad=True)
    opt = Adam([s], lr=config.lr)
    trace: list[LossBreakdown] = []
    for it in range(config.iterations):
        coeffs = _coefficients(s, config.sampling_mode, config.tau, rng)
        _, x_end, _ = run_masked_step_continuous(model, x_t, t, coeffs, cache)
        l_feat = feature_loss(x_end, x_ori_end)
        l_sparse = sparse_loss(s)
        l_bimodal = bimodal_loss(s)
        loss = total_loss(l_feat, l_sparse, l_bimodal,
                          config.lambda1, config.lambda2, weight)
        if not np.isfinite(loss.item()):
            raise MaskTrainingError(t, s.data.copy())
        trace.append(LossBreakdown(timestep=t, iteration=it,
                                   feature=l_feat.item(), sparse=l_sparse.item(),
                                   bimodal=l_bimodal.item(), weight=weight,
                                   lambda1=config.lambda1, lambda2=config.lambda2))
        grads = backward(loss)
        opt.step(grads)
        T.zero_grads([s])
        np.clip(s.data, 0.0, 1.0, out=s.data)
    return s.data.copy(), trace


# -- full training loop --------------------------------------------------------------


@dataclass
class MaskTrainResult:
    mask: MaskMatrix
    weights: TimestepWeights
    trace: list[LossBreakdown]
    student_states: list[np.ndarray]
    peak_graph_nodes: int

    def write_trace_csv(self, path) -> None:
        lines = ["t,iteration,feature,sparse,bimodal,total,weight"]
        for row in self.trace:
            lines.append(f"{row.timestep},{row.iteration},{row.feature:.9g},"
                         f"{row.sparse:.9g},{row.bimodal:.9g},{row.total:.9g},"
                         f"{row.weight:.3g}")
        from pathlib import Path
        Path(path).write_text("\n".join(lines) + "\n")


def train_mask(model: BlockChainModel, schedule: NoiseSchedule, config: TrainerConfig,
               sampler: str = "ddim", initial_scores: np.ndarray | None = None,
               model_checksum: str | None = None) -> MaskTrainResult:
    """Learn scores for every timestep and binarize them into a mask.

    Walks the chain once from pure noise: at each step the teacher provides
    the reference end feature, the step's score row is optimized in
    isolation, and the student state advances through the continuous masked
    step before being detached and carried forward.
    """
    config.validate()
    if not model.frozen:
        raise ValueError("mask training requires a frozen teacher model")
    steps, blocks = schedule.timesteps, model.num_blocks
    noise_rng = stream(config.seed, "mask-noise")
    x = noise_rng.standard_normal((config.batch_size, model.data_dim)).astype(np.float32)

    reference = teacher_trajectory(
        model, x, schedule, mode=sampler,
        rng=stream(config.seed, "teacher-trajectory") if sampler == "ddpm" else None)
    weights = compute_timestep_weights(reference)
    if not config.loss_scaling:
        weights = TimestepWeights(change=weights.change,
                                  weight=np.ones_like(weights.weight))

    scores = np.ones((steps, blocks), dtype=np.float32)
    if initial_scores is not None:
        scores = np.asarray(initial_scores, dtype=np.float32).copy()
        if scores.shape != (steps, blocks):
            raise ValueError(f"initial scores must have shape {(steps, blocks)}")
    scores[-1] = 1.0  # the first sampling step always computes everything

    trace: list[LossBreakdown] = []
    student_states: list[np.ndarray] = []
    cache = FeatureCache(blocks)
    peak_nodes = T.live_graph_nodes()
    for t in range(steps - 1, -1, -1):
        student_states.append(x)
        if config.teacher_input == "student_state":
            _, feats = model.forward(x, t)
            x_ori_end = feats[-1].data
        else:
            x_ori_end = reference.end_feature_at(t)
        if t < steps - 1 and config.iterations > 0:
            step_rng = stream(config.seed, f"mask-sample/t{t}")
            scores[t], step_trace = optimize_timestep(
                model, t, scores[t], x, cache, x_ori_end,
                float(weights.weight[t]), config, rng=step_rng)
            trace.extend(step_trace)
        peak_nodes = max(peak_nodes, T.live_graph_nodes())
        eps, _, cache = run_masked_step_continuous(
            model, x, t, scores[t].astype(np.float32), cache,
            last_step=(t == steps - 1))
        eps_val = eps.data.copy()
        if sampler == "ddim" and t == 0:
            x = predict_initial(x, eps_val, t, schedule)
        elif sampler == "ddim":
            x = reverse_step(x, eps_val, t, schedule, mode="ddim")
        else:
            x = reverse_step(x, eps_val, t, schedule, mode=sampler,
                             rng=stream(config.seed, f"mask-step-noise/t{t}"))
        x = np.asarray(x, dtype=np.float32)

    binary = binarize(scores, config.threshold)
    metadata = {
        "lambda1": config.lambda1, "lambda2": config.lambda2,
        "sampling_mode": config.sampling_mode, "tau": config.tau,
        "threshold": config.threshold, "seed": config.seed,
        "iterations": config.iterations, "batch_size": config.batch_size,
        "lr": config.lr, "loss_scaling": config.loss_scaling,
        "teacher_input": config.teacher_input, "sampler": sampler,
        "schedule_id": schedule.schedule_id,
        "model_checksum": model_checksum or model.checksum(),
    }
    mask = MaskMatrix(scores=scores, binary=binary, block_ids=model.block_ids,
                      rectified=False, metadata=metadata)
    mask.validate()
    return MaskTrainResult(mask=mask, weights=weights, trace=trace,
                           student_states=student_states, peak_graph_nodes=peak_nodes)
