"""Frozen-able residual block-chain denoisers and their on-disk container.

The model is a plain chain of pre-norm residual blocks over a shared hidden
width: pure MLP blocks for 2-d point data, alternating attention-like token
mixing and MLP blocks over an 8x8 image split into 2x2 patches. A learned
per-step embedding row is added at every block input, so each block is a pure
function of (input, timestep). Input and output projections sit outside the
chain and always execute.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, make_schedule
from .tensor import Tensor

BLOCK_MLP = "mlp"
BLOCK_ATTN = "attn"

IMAGE_SIDE = 8
PATCH_SIDE = 2
PATCH_DIM = PATCH_SIDE * PATCH_SIDE
NUM_PATCHES = (IMAGE_SIDE // PATCH_SIDE) ** 2


class ModelError(ValueError):
    """Model construction or usage violated a contract."""


def _sinusoidal_table(timesteps: int, width: int) -> np.ndarray:
    half = (width + 1) // 2
    pos = np.arange(timesteps, dtype=np.float64)[:, None]
    freq = np.exp(-np.log(200.0) * np.arange(half, dtype=np.float64) / max(half - 1, 1))
    angles = pos * freq[None, :] * (2.0 * np.pi / timesteps)
    table = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return table[:, :width]


@dataclass
class ModelSpec:
    mode: str                      # "points" | "image8"
    blocks: int
    width: int
    hidden: int
    timesteps: int                 # length of the step-embedding table
    block_kinds: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("points", "image8"):
            raise ModelError(f"unknown model mode {self.mode!r}")
        if self.blocks < 1 or self.width < 1 or self.hidden < 1 or self.timesteps < 1:
            raise ModelError("blocks, width, hidden, and timesteps must be positive")
        if not self.block_kinds:
            if self.mode == "points":
                self.block_kinds = [BLOCK_MLP] * self.blocks
            else:
                self.block_kinds = [BLOCK_ATTN if i % 2 == 0 else BLOCK_MLP
                                    for i in range(self.blocks)]
        if len(self.block_kinds) != self.blocks:
            raise ModelError("block_kinds length must equal the block count")
        for kind in self.block_kinds:
            if kind not in (BLOCK_MLP, BLOCK_ATTN):
                raise ModelError(f"unknown block kind {kind!r}")
        if self.mode == "points" and BLOCK_ATTN in self.block_kinds:
            raise ModelError("attention blocks need the token grid of image mode")

    @property
    def data_dim(self) -> int:
        return 2 if self.mode == "points" else IMAGE_SIDE * IMAGE_SIDE

    @property
    def tokens(self) -> int | None:
        return None if self.mode == "points" else NUM_PATCHES

    @property
    def patch_dim(self) -> int:
        return 2 if self.mode == "points" else PATCH_DIM

    def to_json(self) -> dict:
        return {"mode": self.mode, "blocks": self.blocks, "width": self.width,
                "hidden": self.hidden, "timesteps": self.timesteps,
                "block_kinds": list(self.block_kinds)}

    @classmethod
    def from_json(cls, data: dict) -> "ModelSpec":
        return cls(mode=data["mode"], blocks=int(data["blocks"]), width=int(data["width"]),
                   hidden=int(data["hidden"]), timesteps=int(data["timesteps"]),
                   block_kinds=list(data["block_kinds"]))


class BlockChainModel:
    """Ordered chain of residual blocks sharing one hidden width."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        self.frozen = False
        self._params: dict[str, Tensor] = {}
        w, h = spec.width, spec.hidden
        depth_scale = 1.0 / np.sqrt(spec.blocks)
        # Alternating residual-branch scales give blocks genuinely uneven
        # importance, as in real networks; uniform toy chains degenerate to
        # whole-step on/off decisions with no block-level structure.
        branch_gain = [1.0 if b % 2 == 0 else 0.35 for b in range(spec.blocks)]
        self._param("in_w", rng.standard_normal((spec.patch_dim, w)) / np.sqrt(spec.patch_dim))
        self._param("in_b", np.zeros(w))
        # Sinusoidal init keeps conditioning smooth across adjacent steps,
        # which is what makes cross-step feature reuse viable at all; the
        # table stays trainable.
        self._param("emb", 0.5 * _sinusoidal_table(spec.timesteps, w))
        for b, kind in enumerate(spec.block_kinds):
            prefix = f"block{b:02d}"
            if kind == BLOCK_MLP:
                self._param(f"{prefix}.w1", rng.standard_normal((w, h)) / np.sqrt(w))
                self._param(f"{prefix}.b1", np.zeros(h))
                self._param(f"{prefix}.w2",
                            branch_gain[b] * depth_scale
                            * rng.standard_normal((h, w)) / np.sqrt(h))
                self._param(f"{prefix}.b2", np.zeros(w))
            else:
                for name in ("wq", "wk", "wv"):
                    self._param(f"{prefix}.{name}", rng.standard_normal((w, w)) / np.sqrt(w))
                self._param(f"{prefix}.wo",
                            branch_gain[b] * depth_scale
                            * rng.standard_normal((w, w)) / np.sqrt(w))
        self._param("out_w", rng.standard_normal((w, spec.patch_dim)) / np.sqrt(w))
        self._param("out_b", np.zeros(spec.patch_dim))

    def _param(self, name: str, value: np.ndarray) -> None:
        self._params[name] = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)

    # -- parameter access ---------------------------------------------------

    @property
    def num_blocks(self) -> int:
        return self.spec.blocks

    @property
    def width(self) -> int:
        return self.spec.width

    @property
    def data_dim(self) -> int:
        return self.spec.data_dim

    @property
    def block_ids(self) -> list[str]:
        return [f"block{b:02d}:{kind}" for b, kind in enumerate(self.spec.block_kinds)]

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def freeze(self) -> None:
        self.frozen = True
        for p in self._params.values():
            p.requires_grad = False

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self._params):
            digest.update(name.encode())
            digest.update(self._params[name].data.astype("<f4").tobytes())
        return digest.hexdigest()

    # -- forward pieces -----------------------------------------------------
    # Shared by the unmasked forward and the masked executor so that an
    # all-compute mask reproduces the unmasked chain bit for bit.

    def embedding_row(self, t: int) -> Tensor:
        if not 0 <= t < self.spec.timesteps:
            raise ModelError(f"timestep {t} outside embedding table of length {self.spec.timesteps}")
        return T.take(self._params["emb"], t)

    def embed_input(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.spec.data_dim or x.ndim != 2:
            raise ModelError(
                f"expected input of shape (batch, {self.spec.data_dim}), got {x.shape}")
        if self.spec.mode == "image8":
            x = T.reshape(x, (x.shape[0], NUM_PATCHES, PATCH_DIM))
        return T.add_bias(T.matmul(x, self._params["in_w"]), self._params["in_b"])

    def block_forward(self, b: int, h: Tensor, emb_row: Tensor) -> Tensor:
        kind = self.spec.block_kinds[b]
        prefix = f"block{b:02d}"
        u = T.layer_norm(T.add_bias(h, emb_row))
        if kind == BLOCK_MLP:
            z = T.relu(T.add_bias(T.matmul(u, self._params[f"{prefix}.w1"]),
                                  self._params[f"{prefix}.b1"]))
            z = T.add_bias(T.matmul(z, self._params[f"{prefix}.w2"]),
                           self._params[f"{prefix}.b2"])
        else:
            q = T.matmul(u, self._params[f"{prefix}.wq"])
            k = T.matmul(u, self._params[f"{prefix}.wk"])
            v = T.matmul(u, self._params[f"{prefix}.wv"])
            scores = T.mul(T.matmul(q, T.transpose_last2(k)), 1.0 / np.sqrt(self.spec.width))
            z = T.matmul(T.softmax(scores), v)
            z = T.matmul(z, self._params[f"{prefix}.wo"])
        return T.add(h, z)

    def project_output(self, h: Tensor) -> Tensor:
        out = T.add_bias(T.matmul(h, self._params["out_w"]), self._params["out_b"])
        if self.spec.mode == "image8":
            out = T.reshape(out, (out.shape[0], IMAGE_SIDE * IMAGE_SIDE))
        return out

    def forward(self, x, t: int) -> tuple[Tensor, list[Tensor]]:
        """Noise prediction plus the ordered per-block outputs.

        The last feature is the end-block output before the output
        projection.
        """
        h = self.embed_input(T.as_tensor(x))
        emb_row = self.embedding_row(t)
        features: list[Tensor] = []
        for b in range(self.spec.blocks):
            h = self.block_forward(b, h, emb_row)
            features.append(h)
        return self.project_output(h), features


def model_forward(model: BlockChainModel, x, t: int) -> tuple[Tensor, list[Tensor]]:
    return model.forward(x, t)


# -- container I/O ------------------------------------------------------------


def save_container(model: BlockChainModel, schedule: NoiseSchedule, out_dir,
                   seed: int, extra: dict | None = None, force: bool = False) -> Path:
    """Persist the model as manifest.json plus one raw little-endian float32
    file per parameter."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} is not empty (use force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(model.parameters()):
        data = model.param(name).data.astype("<f4")
        fname = name.replace("/", "_") + ".bin"
        raw = data.tobytes()
        (out / fname).write_bytes(raw)
        entries.append({"name": name, "file": fname, "shape": list(data.shape),
                        "sha256": hashlib.sha256(raw).hexdigest()})
    manifest = {
        "format_version": 1,
        "kind": "block-chain-denoiser",
        "arch": model.spec.to_json(),
        "schedule": {"kind": schedule.kind, "timesteps": schedule.timesteps,
                     "beta_min": schedule.beta_min, "beta_max": schedule.beta_max},
        "seed": int(seed),
        "frozen": bool(model.frozen),
        "params": entries,
        "checksum": model.checksum(),
        "extra": extra or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_container(path) -> tuple[BlockChainModel, NoiseSchedule, dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = ModelSpec.from_json(manifest["arch"])
    model = BlockChainModel(spec, np.random.default_rng(0))
    for entry in manifest["params"]:
        raw = (root / entry["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ModelError(f"checksum mismatch for parameter {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        model.param(entry["name"]).data = arr.astype(np.float32)
    if manifest.get("frozen"):
        model.freeze()
    if model.checksum() != manifest["checksum"]:
        raise ModelError("model checksum does not match the manifest")
    sched = manifest["schedule"]
    schedule = make_schedule(sched["timesteps"], sched["beta_min"], sched["beta_max"],
                             kind=sched["kind"])
    return model, schedule, manifest
