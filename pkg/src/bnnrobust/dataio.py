"""Datasets and on-disk formats.

Reads MNIST-style IDX files, filters class subsets, generates synthetic
Gaussian blobs, and saves/loads networks, posteriors and datasets as a JSON
header next to a little-endian float64 blob (see ``docs/formats.md``).
"""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bayes import HmcEnsemble, McDropout, TrainConfig, ViGaussian
from .nn import Architecture, Network

FORMAT_VERSION = 1
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Inputs in [0, 1], compact labels, and the original-to-compact label map."""

    inputs: np.ndarray
    labels: np.ndarray
    class_map: dict = field(default_factory=dict)

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if len(inputs) != len(labels):
            raise ValueError(f"{len(inputs)} inputs but {len(labels)} labels")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_map", {int(k): int(v) for k, v in self.class_map.items()})

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return self.inputs.shape[1:]

    @property
    def num_classes(self) -> int:
        return len(self.class_map) if self.class_map else int(self.labels.max()) + 1


# --- IDX --------------------------------------------------------------------

def _open(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    if dims[0] == 0:
        raise FormatError(f"{path}: item count is zero")
    body = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(body) < expected:
        raise FormatError(f"{path}: truncated data, {len(body)} of {expected} bytes")
    return np.frombuffer(body, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair (gzip optional); pixels are scaled by 1/255."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    classes = sorted(set(labels.tolist()))
    return Dataset(images.astype(np.float64) / 255.0, labels, {c: c for c in classes})


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray, compress: bool = False):
    """Write uint8 images ``(N, rows, cols)`` and labels ``(N,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    opener = (lambda p: gzip.GzipFile(p, "wb", mtime=0)) if compress else (lambda p: open(p, "wb"))
    with opener(images_path) as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with opener(labels_path) as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def subset_classes(ds: Dataset, keep: Sequence[int]) -> Dataset:
    """Keep the given original labels and re-index them compactly in sorted order."""
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise ValueError("keep must be nonempty")
    inverse = {v: k for k, v in ds.class_map.items()} if ds.class_map else None
    original = np.array([inverse[int(c)] for c in ds.labels]) if inverse else ds.labels
    present = set(original.tolist())
    missing = [k for k in keep if k not in present]
    if missing:
        raise ValueError(f"classes {missing} not present in dataset")
    sel = np.isin(original, keep)
    class_map = {k: i for i, k in enumerate(keep)}
    labels = np.array([class_map[int(c)] for c in original[sel]], dtype=np.int64)
    return Dataset(ds.inputs[sel], labels, class_map)


def synthetic_gaussian_blobs(num_per_class: int, dims: int, separation: float, seed: int,
                             sigma: float = 0.1) -> Dataset:
    """Two isotropic Gaussian clusters at ``0.5 +- separation / 2`` on the first axis.

    Other coordinates are centred at 0.5; everything is clipped to [0, 1].
    ``separation`` is measured in the same units as the inputs.
    """
    if num_per_class < 1 or dims < 1 or separation < 0 or sigma <= 0:
        raise ValueError("num_per_class and dims must be positive, separation non-negative")
    rng = np.random.default_rng(seed)
    centers = np.full((2, dims), 0.5)
    centers[0, 0] -= separation / 2
    centers[1, 0] += separation / 2
    labels = np.repeat([0, 1], num_per_class)
    X = centers[labels] + sigma * rng.standard_normal((2 * num_per_class, dims))
    return Dataset(np.clip(X, 0.0, 1.0), labels, {0: 0, 1: 1})


def downscale(ds: Dataset, factor: int = 2) -> Dataset:
    """Average-pool square images by ``factor``."""
    n, r, c = ds.inputs.shape
    if r % factor or c % factor:
        raise ValueError(f"image size {r}x{c} not divisible by {factor}")
    x = ds.inputs.reshape(n, r // factor, factor, c // factor, factor).mean(axis=(2, 4))
    return Dataset(x, ds.labels, ds.class_map)


def load_bundled_mnist(split: str = "train") -> Dataset:
    """The bundled 10,000-digit MNIST sample (``train`` or ``test`` split)."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = resources.files("bnnrobust") / "data" / f"mnist-{split}"
    with resources.as_file(root / "images-idx3-ubyte.gz") as im, \
            resources.as_file(root / "labels-idx1-ubyte.gz") as lb:
        return load_idx(im, lb)


def load_mnist17(split: str = "train", size: int = 28, flatten: bool = True) -> Dataset:
    """Digits 1 and 7 (relabelled 0 and 1), optionally downscaled to 14x14."""
    ds = subset_classes(load_bundled_mnist(split), [1, 7])
    if size == 14:
        ds = downscale(ds, 2)
    elif size != 28:
        raise ValueError("size must be 28 or 14")
    if flatten:
        ds = Dataset(ds.inputs.reshape(len(ds), -1), ds.labels, ds.class_map)
    return ds


# --- JSON + blob serialization ---------------------------------------------

def _blob_path(header_path: Path) -> Path:
    return header_path.with_suffix(".bin")


def json_safe(obj):
    """Replace non-finite floats by ``None`` so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write(header_path, kind: str, meta: dict, arrays: dict) -> Path:
    header_path = Path(header_path)
    blob = bytearray()
    entries = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(blob)})
        blob += arr.tobytes()
    blob_path = _blob_path(header_path)
    blob_path.write_bytes(bytes(blob))
    header = {
        "format": f"bnnrobust.{kind}",
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "blob": blob_path.name,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "dtype": "<f8",
        "arrays": entries,
        **meta,
    }
    header_path.write_text(json.dumps(json_safe(header), indent=2, sort_keys=True, allow_nan=False) + "\n",
                           encoding="utf-8")
    return header_path


def _read(header_path, kind: Optional[str] = None) -> tuple:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text(encoding="utf-8"))
    fmt = header.get("format", "")
    if not fmt.startswith("bnnrobust.") or (kind is not None and fmt != f"bnnrobust.{kind}"):
        raise FormatError(f"{header_path}: expected bnnrobust.{kind or '*'}, found {fmt!r}")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{header_path}: unsupported format_version {header.get('format_version')}")
    blob = (header_path.parent / header["blob"]).read_bytes()
    if len(blob) != header["blob_bytes"] or hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise FormatError(f"{header_path}: blob size or checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return header, arrays


def save_network(path, net: Network, provenance: Optional[dict] = None) -> Path:
    meta = {"architecture": net.arch.to_dict(), "num_classes": net.num_classes,
            "n_params": net.arch.n_params, "provenance": provenance or {}}
    return _write(path, "network", meta, {"weights": net.weights})


def load_network(path) -> Network:
    header, arrays = _read(path, "network")
    return Network(Architecture.from_dict(header["architecture"]), arrays["weights"])


_METHOD = {HmcEnsemble: "hmc", ViGaussian: "vi", McDropout: "mcd"}


def save_posterior(path, post, provenance: Optional[dict] = None) -> Path:
    method = _METHOD[type(post)]
    meta = {"method": method, "architecture": post.arch.to_dict(), "n_params": post.arch.n_params,
            "train_config": asdict(post.config) if post.config is not None else None,
            "diagnostics": post.diagnostics, "provenance": provenance or {}}
    if method == "hmc":
        meta["accept_rate"] = post.accept_rate
        arrays = {"samples": post.samples}
    elif method == "vi":
        arrays = {"mu": post.mu, "log_sigma": post.log_sigma}
    else:
        meta["drop_rates"] = list(post.drop_rates)
        arrays = {"point_weights": post.point_weights}
    return _write(path, "posterior", meta, arrays)


def load_posterior(path):
    header, arrays = _read(path, "posterior")
    arch = Architecture.from_dict(header["architecture"])
    cfg = TrainConfig(**header["train_config"]) if header.get("train_config") else None
    diag = header.get("diagnostics", {})
    method = header["method"]
    if method == "hmc":
        return HmcEnsemble(arch, arrays["samples"], header["accept_rate"], cfg, diag)
    if method == "vi":
        return ViGaussian(arch, arrays["mu"], arrays["log_sigma"], cfg, diag)
    if method == "mcd":
        return McDropout(arch, arrays["point_weights"], tuple(header["drop_rates"]), cfg, diag)
    raise FormatError(f"unknown posterior method {method!r}")


def save_dataset(path, ds: Dataset) -> Path:
    meta = {"class_map": {str(k): v for k, v in ds.class_map.items()}, "size": len(ds)}
    return _write(path, "dataset", meta, {"inputs": ds.inputs, "labels": ds.labels.astype(np.float64)})


def load_dataset(path) -> Dataset:
    header, arrays = _read(path, "dataset")
    return Dataset(arrays["inputs"], arrays["labels"].astype(np.int64),
                   {int(k): v for k, v in header["class_map"].items()})
