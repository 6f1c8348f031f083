"""Training-free mask rectification and an exact liveness cross-check.

A computed feature is consumed in exactly two ways on a chain: as the input
of the next block in the same step, and as the cache served to later steps
until the next refresh. When the next block skips and the following step
recomputes the same block, nobody ever reads the feature, so its cell can be
zeroed without changing any output.

The rectification rule applies that observation in a single pass: rows are
scanned from the last sampling step (row 0) to the first, blocks from the end
of the chain backward, and freshly zeroed cells feed the test for the cells
before them. The liveness oracle instead walks the exact dataflow of a masked
run and reports every computed cell whose value reaches a noise prediction;
it certifies the rule (and quantifies whatever slack the rule leaves).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule
from .executor import MaskMatrix, run_masked_chain
from .model import BlockChainModel
from .seeds import stream


@dataclass
class RectificationReport:
    flipped: list[tuple[int, int]]
    zeros_before: int
    zeros_after: int
    per_seed_deviation: dict[int, float] = field(default_factory=dict)

    @property
    def max_deviation(self) -> float | None:
        if not self.per_seed_deviation:
            return None
        return max(self.per_seed_deviation.values())

    def to_json(self) -> dict:
        return {
            "flipped": [[int(t), int(b)] for t, b in self.flipped],
            "zeros_before": self.zeros_before,
            "zeros_after": self.zeros_after,
            "per_seed_deviation": {str(k): float(v)
                                   for k, v in sorted(self.per_seed_deviation.items())},
            "max_deviation": self.max_deviation,
        }

    def save(self, path) -> Path:
        out = Path(path)
        out.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return out


def rectify(mask: MaskMatrix) -> tuple[MaskMatrix, RectificationReport]:
    """Zero every cell whose feature no block and no later step consumes.

    Scans rows in execution-reverse order (row 0 = last sampling step first)
    and blocks from next-to-last down to the first; the end block is never
    rectified because its output is the step's prediction. Cells zeroed
    earlier in the pass participate in later tests (in-place cascade). Row
    t - 1 is final when row t is examined, so the cross-step condition always
    reads settled values.
    """
    mask.validate()
    m = mask.binary.copy()
    steps, blocks = m.shape
    flipped: list[tuple[int, int]] = []
    for t in range(steps):
        for b in range(blocks - 2, -1, -1):
            if m[t, b] == 0:
                continue
            if m[t, b + 1] != 0:
                continue
            # At the last sampling step there is no later step to serve.
            if t > 0 and m[t - 1, b] != 1:
                continue
            m[t, b] = 0
            flipped.append((t, b))
    out = MaskMatrix(scores=mask.scores.copy(), binary=m, block_ids=list(mask.block_ids),
                     rectified=True, metadata=dict(mask.metadata))
    out.validate()
    report = RectificationReport(flipped=flipped, zeros_before=mask.zeros(),
                                 zeros_after=out.zeros())
    return out, report


def liveness_oracle(mask: MaskMatrix) -> set[tuple[int, int]]:
    """Computed cells whose value reaches a noise prediction of any step.

    Every step's end feature feeds that step's prediction, and predictions
    drive the state chain, so the sinks are the end-column values of every
    step. A skipped cell serves whatever the latest earlier-executed step
    stored, so reads resolve through the cache to the producing cell.
    """
    mask.validate()
    m = mask.binary
    steps, blocks = m.shape

    # producer[t][b]: the step whose computation the value at (t, b) carries.
    producer = np.empty((steps, blocks), dtype=int)
    last_write = np.full(blocks, -1)
    for t in range(steps - 1, -1, -1):
        for b in range(blocks):
            if m[t, b]:
                last_write[b] = t
            producer[t, b] = last_write[b]

    live: set[tuple[int, int]] = set()
    stack = [(int(producer[t, blocks - 1]), blocks - 1) for t in range(steps)]
    while stack:
        t, b = stack.pop()
        if (t, b) in live:
            continue
        live.add((t, b))
        if b > 0:
            stack.append((int(producer[t, b - 1]), b - 1))
    return live


def verify_equivalence(model: BlockChainModel, mask_before: MaskMatrix,
                       mask_after: MaskMatrix, seeds, schedule: NoiseSchedule,
                       mode: str = "ddim", batch: int = 8) -> dict[int, float]:
    """Max absolute final-sample deviation between two masks, per seed."""
    deviations: dict[int, float] = {}
    for seed in seeds:
        noise = stream(seed, "verify-noise").standard_normal(
            (batch, model.data_dim)).astype(np.float32)
        a, _, _ = run_masked_chain(model, noise, mask_before, schedule, mode=mode,
                                   rng=stream(seed, "verify-step") if mode == "ddpm" else None)
        b, _, _ = run_masked_chain(model, noise, mask_after, schedule, mode=mode,
                                   rng=stream(seed, "verify-step") if mode == "ddpm" else None)
        deviations[int(seed)] = float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))
    return deviations
