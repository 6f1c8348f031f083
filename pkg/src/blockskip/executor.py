"""Masked execution of a block chain with per-block feature caching.

Binary mode: a block either recomputes its feature (and refreshes the cache
entry) or serves the cached feature untouched. Continuous mode: the feature
is the convex blend ``c * computed + (1 - c) * cached`` and the cache entry is
refreshed exactly when the coefficient exceeds 0.5 or the chain is at its
first step. Cached features always enter the computation as constants, so
gradients never cross timestep boundaries.

Step functions are functional over the cache: they return an updated copy and
leave the input cache untouched, which lets a trainer re-run a step many
times from identical state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, TrajectoryRecord, predict_initial, reverse_step
from .model import BlockChainModel
from .tensor import Tensor

CACHE_REFRESH_THRESHOLD = 0.5


class CacheError(RuntimeError):
    """A cache entry was read before anything was stored in it."""


class MaskError(ValueError):
    """A mask violated its invariants or disagreed with the model shape."""


class FeatureCache:
    """Per-block feature store carried across timesteps.

    ``writes`` logs every (t, b) refresh so tests can assert the update
    discipline against the mask that drove the run.
    """

    def __init__(self, num_blocks: int):
        self.entries: list[np.ndarray | None] = [None] * num_blocks
        self.writes: list[tuple[int, int]] = []

    def initialized(self, b: int) -> bool:
        return self.entries[b] is not None

    def read(self, t: int, b: int) -> np.ndarray:
        value = self.entries[b]
        if value is None:
            raise CacheError(f"cache entry for block {b} read at timestep {t} before any write")
        return value

    def write(self, t: int, b: int, value: np.ndarray) -> None:
        self.entries[b] = value
        self.writes.append((t, b))

    def clone(self) -> "FeatureCache":
        other = FeatureCache(len(self.entries))
        other.entries = list(self.entries)
        other.writes = list(self.writes)
        return other


@dataclass
class ExecutionStats:
    """Which cells computed during a chain run, and what they cost."""

    computed: np.ndarray  # bool [T, B]

    @property
    def compute_counts(self) -> np.ndarray:
        return self.computed.sum(axis=0).astype(int)

    @property
    def skipped(self) -> int:
        return int((~self.computed).sum())

    def total_macs(self, cost_model) -> float:
        steps = self.computed.shape[0]
        return float(steps * cost_model.overhead
                     + (self.computed * cost_model.block_macs).sum())

    def write_csv(self, path, cost_model=None) -> Path:
        out = Path(path)
        lines = ["t,b,computed,macs"]
        steps, blocks = self.computed.shape
        for t in range(steps):
            for b in range(blocks):
                done = int(self.computed[t, b])
                macs = cost_model.block_macs[b] * done if cost_model is not None else 0
                lines.append(f"{t},{b},{done},{int(macs)}")
        out.write_text("\n".join(lines) + "\n")
        return out


MASK_FORMAT_VERSION = 1


@dataclass
class MaskMatrix:
    """Per-(timestep, block) execution decisions.

    ``scores`` are the continuous relaxation in [0, 1]; ``binary`` is the
    thresholded execute/skip table actually used at inference.
    """

    scores: np.ndarray          # float32 [T, B]
    binary: np.ndarray          # uint8 [T, B]
    block_ids: list[str]
    rectified: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def num_steps(self) -> int:
        return self.scores.shape[0]

    @property
    def num_blocks(self) -> int:
        return self.scores.shape[1]

    def validate(self) -> None:
        if self.scores.shape != self.binary.shape or self.scores.ndim != 2:
            raise MaskError(f"scores {self.scores.shape} and binary {self.binary.shape} must be "
                            "equal 2-d shapes")
        if len(self.block_ids) != self.num_blocks:
            raise MaskError("block_ids length must equal the block count")
        if np.any(self.scores < 0.0) or np.any(self.scores > 1.0):
            raise MaskError("scores must lie in [0, 1]")
        if not np.all(np.isin(self.binary, (0, 1))):
            raise MaskError("binary entries must be 0 or 1")
        if not np.all(self.binary[-1] == 1):
            raise MaskError("the first sampling step (last row) must compute every block")

    def zeros(self) -> int:
        return int((self.binary == 0).sum())

    def copy(self) -> "MaskMatrix":
        return MaskMatrix(scores=self.scores.copy(), binary=self.binary.copy(),
                          block_ids=list(self.block_ids), rectified=self.rectified,
                          metadata=dict(self.metadata))

    def to_json(self) -> dict:
        return {
            "version": MASK_FORMAT_VERSION,
            "T": self.num_steps,
            "B": self.num_blocks,
            "block_ids": list(self.block_ids),
            "s": [float(v) for v in self.scores.ravel()],
            "m": [int(v) for v in self.binary.ravel()],
            "rectified": bool(self.rectified),
            "metadata": self.metadata,
        }

    def save(self, path) -> Path:
        out = Path(path)
        out.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return out

    @classmethod
    def from_json(cls, data: dict) -> "MaskMatrix":
        steps, blocks = int(data["T"]), int(data["B"])
        mask = cls(
            scores=np.asarray(data["s"], dtype=np.float32).reshape(steps, blocks),
            binary=np.asarray(data["m"], dtype=np.uint8).reshape(steps, blocks),
            block_ids=list(data["block_ids"]),
            rectified=bool(data["rectified"]),
            metadata=dict(data.get("metadata", {})),
        )
        mask.validate()
        return mask

    @classmethod
    def load(cls, path) -> "MaskMatrix":
        return cls.from_json(json.loads(Path(path).read_text()))


def all_ones_mask(num_steps: int, block_ids: list[str], metadata: dict | None = None
                  ) -> MaskMatrix:
    blocks = len(block_ids)
    return MaskMatrix(scores=np.ones((num_steps, blocks), dtype=np.float32),
                      binary=np.ones((num_steps, blocks), dtype=np.uint8),
                      block_ids=list(block_ids), metadata=metadata or {})


# -- step execution -----------------------------------------------------------


def run_masked_step_binary(model: BlockChainModel, x_t, t: int,
                           mask_row: np.ndarray, cache: FeatureCache,
                           last_step: bool = False
                           ) -> tuple[Tensor, Tensor, FeatureCache]:
    """Execute one chain step under a binary row: compute-and-refresh where 1,
    serve the cache where 0."""
    new_cache = cache.clone()
    h = model.embed_input(T.as_tensor(x_t))
    emb_row = model.embedding_row(t)
    for b in range(model.num_blocks):
        if mask_row[b]:
            h = model.block_forward(b, h, emb_row)
            new_cache.write(t, b, h.data)
        else:
            h = Tensor(new_cache.read(t, b))
    eps = model.project_output(h)
    return eps, h, new_cache


def run_masked_step_continuous(model: BlockChainModel, x_t, t: int,
                               coeffs: Sequence, cache: FeatureCache,
                               last_step: bool = False
                               ) -> tuple[Tensor, Tensor, FeatureCache]:
    """Execute one chain step under continuous coefficients in [0, 1].

    Each entry of ``coeffs`` may be a float or a scalar Tensor (so mask
    scores can carry gradients). The blend reads the cache as a detached
    constant; the cache entry is refreshed with the blended value when the
    coefficient exceeds 0.5 or ``last_step`` marks the first sampling step.
    A coefficient of exactly 1 never touches the cache entry, which keeps
    the first step well defined before anything was stored.
    """
    new_cache = cache.clone()
    h = model.embed_input(T.as_tensor(x_t))
    emb_row = model.embedding_row(t)
    for b in range(model.num_blocks):
        c = T.as_tensor(coeffs[b])
        c_val = float(c.data)
        computed = model.block_forward(b, h, emb_row)
        if not new_cache.initialized(b):
            if c_val == 1.0:
                h = computed
            else:
                new_cache.read(t, b)  # raises CacheError naming (t, b)
        else:
            cached = Tensor(new_cache.read(t, b))
            h = T.add(T.mul(c, computed), T.mul(T.sub(1.0, c), cached))
        if c_val > CACHE_REFRESH_THRESHOLD or last_step:
            new_cache.write(t, b, h.data)
    eps = model.project_output(h)
    return eps, h, new_cache


def run_masked_chain(model: BlockChainModel, x_start: np.ndarray, mask: MaskMatrix,
                     schedule: NoiseSchedule, mode: str = "ddim",
                     rng: np.random.Generator | None = None, seed: int | None = None
                     ) -> tuple[np.ndarray, TrajectoryRecord, ExecutionStats]:
    """Run the full reverse chain under a binary mask."""
    mask.validate()
    if mask.num_blocks != model.num_blocks:
        raise MaskError(f"mask has {mask.num_blocks} blocks, model has {model.num_blocks}")
    if mask.num_steps != schedule.timesteps:
        raise MaskError(f"mask has {mask.num_steps} rows, sampler runs {schedule.timesteps} steps")
    record = TrajectoryRecord(schedule_id=schedule.schedule_id, seed=seed)
    stats = ExecutionStats(computed=np.zeros((mask.num_steps, mask.num_blocks), dtype=bool))
    cache = FeatureCache(model.num_blocks)
    x = np.asarray(x_start, dtype=np.float32)
    for t in range(schedule.timesteps - 1, -1, -1):
        record.states.append(x)
        row = mask.binary[t]
        eps, end, cache = run_masked_step_binary(model, x, t, row, cache,
                                                 last_step=(t == schedule.timesteps - 1))
        record.end_features.append(end.data)
        stats.computed[t] = row.astype(bool)
        eps_val = eps.data
        if mode == "ddim" and t == 0:
            x = predict_initial(x, eps_val, t, schedule)
        else:
            x = reverse_step(x, eps_val, t, schedule, mode=mode, rng=rng)
    record.sample = x
    return x, record, stats
