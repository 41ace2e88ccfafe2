"""On-disk formats: tensor blobs, model manifests, datasets.

Blob container: magic "DIPT", u32 LE version (1), u8 dtype code, u8 ndim,
ndim x u32 LE dims, then the row-major little-endian payload.  Dtype code 0
is float32; code 1 is a packed unsigned bitstream (payload bytes, used for
quantized weight codes).

The model manifest is a JSON document with explicit layer ordering; graph
edges are named input tensors, never inferred.  All loaders are pure and the
structures they return are immutable by convention.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, MalformedBlob, ModelLoadError, ShapeError
from .netgraph import Dataset, LayerSpec, NetGraph, ChannelGroup

MAGIC = b"DIPT"
VERSION = 1
DTYPE_F32 = 0
DTYPE_PACKED = 1
_DTYPE_NAMES = {DTYPE_F32: "f32", DTYPE_PACKED: "packed-uint"}
_DTYPE_CODES = {v: k for k, v in _DTYPE_NAMES.items()}


@dataclass
class TensorBlob:
    """A dense tensor as stored on disk.

    data is float32 for dtype "f32" and uint8 for "packed-uint"; dims always
    multiply out to the element count.
    """

    dims: tuple[int, ...]
    data: np.ndarray
    dtype: str = "f32"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.dtype not in _DTYPE_CODES:
            raise MalformedBlob(f"unsupported dtype {self.dtype!r}")
        want = np.float32 if self.dtype == "f32" else np.uint8
        self.data = np.ascontiguousarray(self.data, dtype=want).reshape(-1)
        if len(self.dims) < 1 or any(d < 1 for d in self.dims):
            raise MalformedBlob(f"invalid dims {self.dims}")
        if int(np.prod(self.dims)) != self.data.size:
            raise MalformedBlob(
                f"dims {self.dims} declare {int(np.prod(self.dims))} elements "
                f"but {self.data.size} provided"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TensorBlob":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        return cls(dims=arr.shape, data=arr.reshape(-1))

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.dims)


def write_blob(blob: TensorBlob, path) -> None:
    code = _DTYPE_CODES[blob.dtype]
    header = MAGIC + struct.pack("<IBB", VERSION, code, len(blob.dims))
    header += struct.pack(f"<{len(blob.dims)}I", *blob.dims)
    payload = blob.data.astype("<f4" if blob.dtype == "f32" else np.uint8).tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header + payload)
    except OSError as e:
        raise MalformedBlob(f"cannot write blob {path}: {e}") from e


def read_blob(path) -> TensorBlob:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise MalformedBlob(f"cannot read blob {path}: {e}") from e
    if len(raw) < 10:
        raise MalformedBlob(f"{path}: file too short for a blob header")
    if raw[:4] != MAGIC:
        raise MalformedBlob(f"{path}: bad magic {raw[:4]!r}")
    version, code, ndim = struct.unpack_from("<IBB", raw, 4)
    if version != VERSION:
        raise MalformedBlob(f"{path}: unsupported version {version}")
    if code not in _DTYPE_NAMES:
        raise MalformedBlob(f"{path}: unknown dtype code {code}")
    off = 10
    if len(raw) < off + 4 * ndim:
        raise MalformedBlob(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    count = int(np.prod(dims)) if ndim else 0
    itemsize = 4 if code == DTYPE_F32 else 1
    if len(raw) != off + count * itemsize:
        raise MalformedBlob(
            f"{path}: payload holds {(len(raw) - off) // itemsize} elements, "
            f"header declares {count}"
        )
    buf = np.frombuffer(raw, dtype="<f4" if code == DTYPE_F32 else np.uint8, offset=off)
    return TensorBlob(dims=dims, data=buf.copy(), dtype=_DTYPE_NAMES[code])


# -- model manifest ----------------------------------------------------------


def load_model(manifest_path) -> NetGraph:
    """Load a manifest JSON plus its referenced blobs into a NetGraph."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ModelLoadError(f"cannot parse manifest {manifest_path}: {e}") from e
    if not isinstance(doc.get("layers"), list) or not doc["layers"]:
        raise ModelLoadError(f"{manifest_path}: manifest has no layers")
    base = manifest_path.parent
    layers = []
    for entry in doc["layers"]:
        name = entry.get("name")
        if not name:
            raise ModelLoadError(f"{manifest_path}: layer without a name")
        weights = {}
        for role, rel in entry.get("weights", {}).items():
            blob_path = base / rel
            if not blob_path.exists():
                raise ModelLoadError(
                    f"layer {name!r}: missing blob file {blob_path}"
                )
            weights[role] = read_blob(blob_path).to_array()
        layers.append(
            LayerSpec(
                name=name,
                kind=entry.get("kind", ""),
                inputs=list(entry.get("inputs", [])),
                params=dict(entry.get("params", {})),
                weights=weights,
            )
        )
    groups = []
    for g in doc.get("groups", []):
        if isinstance(g, dict):
            groups.append(ChannelGroup(list(g["members"]), g.get("kind", "depthwise-couple")))
        else:
            groups.append(ChannelGroup(list(g), "depthwise-couple"))
    meta = dict(doc.get("metadata", {}))
    input_shape = meta.get("input_shape")
    if input_shape is None:
        raise ModelLoadError(f"{manifest_path}: metadata.input_shape is required")
    try:
        return NetGraph(layers, tuple(input_shape), groups, meta)
    except ShapeError as e:
        raise ModelLoadError(str(e)) from e


def save_model(net: NetGraph, out_dir) -> Path:
    """Write a NetGraph as manifest.json plus one blob file per tensor."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for l in net.layers:
        weights = {}
        for role, arr in l.weights.items():
            rel = f"{l.name}.{role}.blob"
            write_blob(TensorBlob.from_array(arr), out_dir / rel)
            weights[role] = rel
        entries.append(
            {
                "name": l.name,
                "kind": l.kind,
                "inputs": list(l.inputs),
                "params": dict(l.params),
                "weights": weights,
            }
        )
    meta = dict(net.metadata)
    meta["input_shape"] = list(net.input_shape)
    doc = {
        "layers": entries,
        "groups": [
            {"members": list(g.members), "kind": g.kind} for g in net.groups
        ],
        "metadata": meta,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


# -- datasets ----------------------------------------------------------------


def load_dataset(path, format: str) -> Dataset:
    if format == "synthetic-spec":
        return _load_synthetic(path)
    if format == "csv":
        return _load_csv(path)
    if format == "idx":
        return _load_idx(path)
    raise DatasetError(f"unknown dataset format {format!r}")


@dataclass
class SyntheticSpec:
    """Gaussian-blob classification data, a pure function of its fields."""

    classes: int
    dim: int
    n: int
    seed: int
    center_scale: float = 2.0
    noise: float = 1.0

    def generate(self) -> Dataset:
        rng = np.random.default_rng(self.seed)
        centers = rng.standard_normal((self.classes, self.dim)) * self.center_scale
        labels = np.arange(self.n) % self.classes
        noise = rng.standard_normal((self.n, self.dim)) * self.noise
        inputs = (centers[labels] + noise).astype(np.float32)
        return Dataset(inputs=inputs, labels=labels.astype(np.int64),
                       num_classes=self.classes)


def _load_synthetic(path) -> Dataset:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot parse synthetic spec {path}: {e}") from e
    try:
        spec = SyntheticSpec(
            classes=int(doc["classes"]),
            dim=int(doc["dim"]),
            n=int(doc["n"]),
            seed=int(doc["seed"]),
            center_scale=float(doc.get("center_scale", 2.0)),
            noise=float(doc.get("noise", 1.0)),
        )
    except KeyError as e:
        raise DatasetError(f"synthetic spec missing field {e}") from e
    if spec.classes < 1 or spec.dim < 1 or spec.n < 1:
        raise DatasetError("synthetic spec fields must be positive")
    return spec.generate()


def _load_csv(path) -> Dataset:
    rows = []
    labels = []
    width = None
    try:
        lines = Path(path).read_text().strip().splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    for ln, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise DatasetError(f"{path}:{ln}: row length {len(parts)} != {width}")
        try:
            rows.append([float(v) for v in parts[:-1]])
            labels.append(int(parts[-1]))
        except ValueError as e:
            raise DatasetError(f"{path}:{ln}: {e}") from e
    if not rows:
        raise DatasetError(f"{path}: empty CSV")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0:
        raise DatasetError(f"{path}: negative label")
    return Dataset(
        inputs=np.asarray(rows, dtype=np.float32),
        labels=labels,
        num_classes=int(labels.max()) + 1,
    )


def _load_idx(path) -> Dataset:
    """Classic ubyte image/label pair; `path` is the images file and the
    labels file is found by the usual images->labels, idx3->idx1 naming."""
    path = Path(path)
    label_name = path.name.replace("images", "labels").replace("idx3", "idx1")
    label_path = path.with_name(label_name)
    if label_path == path or not label_path.exists():
        raise DatasetError(f"cannot locate labels file for {path}")
    images = _read_idx_array(path, expect_magic=2051, rank=3)
    labels = _read_idx_array(label_path, expect_magic=2049, rank=1)
    if len(images) != len(labels):
        raise DatasetError(
            f"{path}: {len(images)} images but {len(labels)} labels"
        )
    inputs = images.astype(np.float32)[:, None, :, :] / np.float32(255.0)
    labels = labels.astype(np.int64)
    return Dataset(inputs=inputs, labels=labels, num_classes=int(labels.max()) + 1)


def _read_idx_array(path, expect_magic, rank):
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    if len(raw) < 4 + 4 * rank:
        raise DatasetError(f"{path}: truncated IDX header")
    magic = struct.unpack_from(">I", raw, 0)[0]
    if magic != expect_magic:
        raise DatasetError(f"{path}: bad IDX magic {magic}, expected {expect_magic}")
    dims = struct.unpack_from(f">{rank}I", raw, 4)
    off = 4 + 4 * rank
    count = int(np.prod(dims))
    if len(raw) != off + count:
        raise DatasetError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(dims).copy()
