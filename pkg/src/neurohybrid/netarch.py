"""Three-branch 3D CNN (brainstem, ventricles, striatum) and its checkpoints.

Each branch applies three conv3d -> batchnorm -> ReLU -> maxpool blocks and a
global average pool.  Branch vectors are concatenated and passed through a
ReLU dense layer (the feature layer used for fusion), dropout, and a single
logit unit with a sigmoid.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import voltensor as vt
from .cohort.phantom import template_centers
from .cohort.structures import BRANCHES, region_structures
from .voltensor import RunningStats, Tensor

N_BLOCKS = 3
CHECKPOINT_MAGIC = b"NHCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODE = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_CODE_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointFormatError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


def _default_crops() -> dict[str, tuple[int, int, int]]:
    return {"brainstem": (48, 48, 48), "ventricles": (64, 64, 64), "striatum": (48, 48, 48)}


def _default_centers() -> dict[str, tuple[int, int, int]]:
    return template_centers()


def _default_filters() -> dict[str, tuple[int, int, int]]:
    return {b: (8, 16, 32) for b in BRANCHES}


@dataclass
class ArchitectureConfig:
    """Architecture hyper-parameters.

    ``crop_shapes`` are in template voxels; the network sees them divided by
    ``downsample``.  ``crop_centers`` anchors each branch's crop at a fixed
    template position; ``None`` centers every crop on the subject's own
    region bounding box instead.
    """

    crop_shapes: dict = field(default_factory=_default_crops)
    crop_centers: dict | None = field(default_factory=_default_centers)
    filters: dict = field(default_factory=_default_filters)
    kernel_size: int = 3
    pool_window: int = 2
    pool_stride: int = 2
    dense_width: int = 256
    dropout_rate: float = 0.5
    use_mri: bool = True
    use_mask: bool = True
    downsample: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.crop_shapes = {k: tuple(int(x) for x in v) for k, v in self.crop_shapes.items()}
        self.filters = {k: tuple(int(x) for x in v) for k, v in self.filters.items()}
        if self.crop_centers is not None:
            self.crop_centers = {k: tuple(int(x) for x in v) for k, v in self.crop_centers.items()}
        self.validate()

    def validate(self) -> None:
        if set(self.crop_shapes) != set(BRANCHES) or set(self.filters) != set(BRANCHES):
            raise ValueError(f"exactly three branches {BRANCHES} are required")
        if self.crop_centers is not None and (
            set(self.crop_centers) != set(BRANCHES) or any(len(c) != 3 for c in self.crop_centers.values())
        ):
            raise ValueError("crop_centers needs one 3D center per branch")
        if not (self.use_mri or self.use_mask):
            raise ValueError("the CNN needs MRI and/or mask input")
        if self.dense_width < 1:
            raise ValueError("dense_width must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd (same padding)")
        if self.downsample < 1:
            raise ValueError("downsample must be >= 1")
        for b in BRANCHES:
            if len(self.filters[b]) != N_BLOCKS or min(self.filters[b]) < 1:
                raise ValueError(f"{b}: need {N_BLOCKS} positive filter counts")
            shape = self.crop_shapes[b]
            if len(shape) != 3 or any(s % self.downsample for s in shape):
                raise ValueError(f"{b}: crop {shape} not divisible by downsample {self.downsample}")
            sizes = [s // self.downsample for s in shape]
            for _ in range(N_BLOCKS):
                if min(sizes) < self.pool_window:
                    raise ValueError(f"{b}: input {self.input_shape(b)} too small for {N_BLOCKS} pooling blocks")
                sizes = [(s - self.pool_window) // self.pool_stride + 1 for s in sizes]

    def channels(self, branch: str) -> int:
        return int(self.use_mri) + int(self.use_mask) * len(region_structures(branch))

    def input_shape(self, branch: str) -> tuple[int, int, int, int]:
        d, h, w = (s // self.downsample for s in self.crop_shapes[branch])
        return (self.channels(branch), d, h, w)

    @property
    def concat_width(self) -> int:
        return sum(self.filters[b][-1] for b in BRANCHES)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_shapes"] = {k: list(v) for k, v in self.crop_shapes.items()}
        d["filters"] = {k: list(v) for k, v in self.filters.items()}
        if self.crop_centers is not None:
            d["crop_centers"] = {k: list(v) for k, v in self.crop_centers.items()}
        return d

    def crop_center(self, branch: str):
        return None if self.crop_centers is None else self.crop_centers[branch]

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureConfig":
        return cls(**dict(d))


@dataclass
class BranchInputSet:
    """Inputs of one subject: a [C, D, H, W] array per branch."""

    brainstem: np.ndarray
    ventricles: np.ndarray
    striatum: np.ndarray

    def __getitem__(self, branch: str) -> np.ndarray:
        return getattr(self, branch)

    @staticmethod
    def stack(items: Sequence["BranchInputSet"]) -> dict[str, np.ndarray]:
        return {b: np.stack([it[b] for it in items]) for b in BRANCHES}


@dataclass
class ModelCheckpoint:
    """Learnable parameters, batch-norm statistics, config and metadata."""

    config: ArchitectureConfig
    params: dict[str, Tensor]
    running: dict[str, RunningStats]
    metadata: dict = field(default_factory=dict)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of everything that gets serialized."""
        out = {k: t.data for k, t in self.params.items()}
        for k, rs in self.running.items():
            out[f"{k}.running_mean"] = rs.mean
            out[f"{k}.running_var"] = rs.var
        return dict(sorted(out.items()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        for k, v in self.state_arrays().items():
            v[...] = snap[k]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).data.dtype


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype) -> Tensor:
    bound = math.sqrt(gain / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def build_model(cfg: ArchitectureConfig, seed: int, dtype=None) -> ModelCheckpoint:
    """Initialize a model: fan-in-scaled uniform weights, zero biases.

    Conv and hidden dense weights use U(+-sqrt(6/fan_in)); the logit layer uses
    U(+-sqrt(1/fan_in)) so the initial sigmoid input stays small.
    """
    cfg.validate()
    dtype = np.dtype(dtype or vt.get_dtype())
    rng = np.random.default_rng(seed)
    k = cfg.kernel_size
    params: dict[str, Tensor] = {}
    running: dict[str, RunningStats] = {}
    for b in BRANCHES:
        c_in = cfg.channels(b)
        for i, f in enumerate(cfg.filters[b], start=1):
            params[f"{b}.conv{i}.weight"] = _uniform(rng, (f, c_in, k, k, k), c_in * k**3, 6.0, dtype)
            params[f"{b}.conv{i}.bias"] = _zeros((f,), dtype)
            params[f"{b}.bn{i}.gamma"] = Tensor(np.ones(f, dtype=dtype), requires_grad=True)
            params[f"{b}.bn{i}.beta"] = _zeros((f,), dtype)
            running[f"{b}.bn{i}"] = RunningStats.fresh(f, dtype)
            c_in = f
    width = cfg.concat_width
    params["dense.weight"] = _uniform(rng, (width, cfg.dense_width), width, 6.0, dtype)
    params["dense.bias"] = _zeros((cfg.dense_width,), dtype)
    params["head.weight"] = _uniform(rng, (cfg.dense_width, 1), cfg.dense_width, 1.0, dtype)
    params["head.bias"] = _zeros((1,), dtype)
    for name, t in params.items():
        t.name = name
    return ModelCheckpoint(cfg, params, running, {"seed": int(seed), "epochs_run": 0})


@dataclass
class ForwardResult:
    probability: Tensor
    logit: Tensor
    features: Tensor
    pooled: dict[str, Tensor]
    activations: dict[str, Tensor]


def check_batch(cfg: ArchitectureConfig, batch: Mapping[str, np.ndarray]) -> int:
    sizes = set()
    for b in BRANCHES:
        if b not in batch:
            raise vt.ShapeError(f"batch lacks branch {b!r}")
        arr = batch[b]
        want = cfg.input_shape(b)
        if arr.ndim != 5 or tuple(arr.shape[1:]) != want:
            raise vt.ShapeError(f"{b}: expected [N, {', '.join(map(str, want))}], got {list(arr.shape)}")
        sizes.add(arr.shape[0])
    if len(sizes) != 1:
        raise vt.ShapeError(f"branches disagree on batch size: {sorted(sizes)}")
    return sizes.pop()


def forward_branch(model: ModelCheckpoint, branch: str, x: Tensor, training: bool):
    """Run one branch; returns (pooled [N, F3], last conv-block activation)."""
    cfg = model.config
    p = model.params
    pad = cfg.kernel_size // 2
    act = None
    for i in range(1, N_BLOCKS + 1):
        x = vt.conv3d(x, p[f"{branch}.conv{i}.weight"], p[f"{branch}.conv{i}.bias"], 1, pad)
        x = vt.batchnorm3d(
            x, p[f"{branch}.bn{i}.gamma"], p[f"{branch}.bn{i}.beta"], model.running[f"{branch}.bn{i}"],
            training, cfg.bn_eps, cfg.bn_momentum,
        )
        x = vt.relu(x)
        act = x
        x = vt.maxpool3d(x, cfg.pool_window, cfg.pool_stride)
    return vt.global_avg_pool(x), act


def forward(
    model: ModelCheckpoint,
    batch: Mapping[str, np.ndarray],
    training: bool = False,
    rng: np.random.Generator | None = None,
    input_grad: bool = False,
) -> ForwardResult:
    """Full forward pass.

    ``batch`` maps branch name to an [N, C, D, H, W] array.  In training mode
    batch-norm uses batch statistics (and updates running statistics) and
    dropout draws from ``rng``.
    """
    cfg = model.config
    check_batch(cfg, batch)
    dtype = model.dtype
    pooled, acts = {}, {}
    for b in BRANCHES:
        x = Tensor(np.asarray(batch[b], dtype=dtype), requires_grad=input_grad)
        pooled[b], acts[b] = forward_branch(model, b, x, training)
    p = model.params
    h = vt.concat([pooled[b] for b in BRANCHES], axis=1)
    feats = vt.relu(vt.dense(h, p["dense.weight"], p["dense.bias"]))
    dropped = vt.dropout(feats, cfg.dropout_rate, training, rng)
    logit = vt.dense(dropped, p["head.weight"], p["head.bias"])
    return ForwardResult(vt.sigmoid(logit), logit, feats, pooled, acts)


CHUNK_BYTES = 256 * 2**20


def auto_chunk(cfg: ArchitectureConfig, itemsize: int = 4, budget: int = CHUNK_BYTES) -> int:
    """Subjects per inference pass so the largest unfolded conv input stays under ``budget`` bytes."""
    k3 = cfg.kernel_size**3
    per = 0
    for b in BRANCHES:
        c, *spatial = cfg.input_shape(b)
        chans = [c, *cfg.filters[b][:-1]]
        for i, ch in enumerate(chans):
            per = max(per, ch * k3 * int(np.prod(spatial)) // 8**i * itemsize)
    return int(max(1, min(32, budget // max(per, 1))))


def _chunks(batch: Mapping[str, np.ndarray], size: int | None):
    n = len(next(iter(batch.values())))
    for start in range(0, n, size):
        yield {b: v[start : start + size] for b, v in batch.items()}


def predict_proba(model: ModelCheckpoint, batch: Mapping[str, np.ndarray], chunk: int | None = None) -> np.ndarray:
    """Inference-mode probabilities, shape [N]."""
    chunk = chunk or auto_chunk(model.config, model.dtype.itemsize)
    out = [forward(model, part).probability.data[:, 0] for part in _chunks(batch, chunk)]
    return np.concatenate(out).astype(np.float64)


def extract_features(model: ModelCheckpoint, batch: Mapping[str, np.ndarray], chunk: int | None = None) -> np.ndarray:
    """Post-ReLU dense-layer activations in inference mode, shape [N, dense_width]."""
    chunk = chunk or auto_chunk(model.config, model.dtype.itemsize)
    out = [forward(model, part).features.data for part in _chunks(batch, chunk)]
    return np.concatenate(out).astype(np.float64)


# ---------------------------------------------------------------- checkpoint I/O


def save_checkpoint(model: ModelCheckpoint, path) -> None:
    header = json.dumps(
        {"config": model.config.to_dict(), "metadata": model.metadata},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    arrays = model.state_arrays()
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<HI", CHECKPOINT_VERSION, len(header))
    buf += header
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        code = _DTYPE_CODE[arr.dtype]
        raw_name = name.encode("utf-8")
        buf += struct.pack("<H", len(raw_name)) + raw_name
        buf += struct.pack("<BB", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=_CODE_DTYPE[code]).tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated while reading {what}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> ModelCheckpoint:
    """Load a checkpoint; any inconsistency raises :class:`CheckpointFormatError`."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = r.unpack("<HI", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(r.take(hlen, "config block").decode("utf-8"))
        cfg = ArchitectureConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: invalid config block: {exc}") from None
    (count,) = r.unpack("<I", "record count")
    arrays: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"record {i} name length")
        name = r.take(nlen, f"record {i} name").decode("utf-8")
        code, rank = r.unpack("<BB", f"record {name} dtype")
        if code not in _CODE_DTYPE:
            raise CheckpointFormatError(f"{path}: record {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I", f"record {name} shape")
        dt = _CODE_DTYPE[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(nbytes, f"record {name} payload"), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.raw):
        raise CheckpointFormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")

    dtype = next(iter(arrays.values())).dtype if arrays else vt.get_dtype()
    model = build_model(cfg, seed=0, dtype=dtype)
    expected = model.state_arrays()
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointFormatError(f"{path}: parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, arr in expected.items():
        if arr.shape != arrays[name].shape or arr.dtype != arrays[name].dtype:
            raise CheckpointFormatError(f"{path}: record {name} has shape/dtype {arrays[name].shape}/{arrays[name].dtype}")
        arr[...] = arrays[name]
    model.metadata = header.get("metadata", {})
    return model
