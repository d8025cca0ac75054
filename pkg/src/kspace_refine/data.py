"""Phantoms, simulated acquisitions, the KRT1 tensor format and dataset manifests.

Dataset layout written by :func:`build_dataset`::

    out_dir/
      manifest.tsv              one line per subject (points at the k-space file)
      masks.tsv                 same format, one line per subject mask
      train/<sid>.ksp.krt       acquired (undersampled, noisy) k-space
      train/<sid>.mask.krt      acquisition mask
      val/..., test/...
      truth/<sid>.img.krt       ground-truth images, val and test only

Ground truth is only reachable through :func:`load_truth`.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import DimensionError, FormatError, InvalidInputError
from .fourier import as_image, as_mask, fft2c
from .masks import MaskSpec, derive_seed, gen_omega

__all__ = [
    "PhantomSpec",
    "TrainSample",
    "ManifestEntry",
    "gen_phantom",
    "simulate_acquisition",
    "write_tensor",
    "read_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "atomic_write",
    "sha256_file",
    "build_dataset",
    "write_manifest",
    "read_manifest",
    "verify_manifest",
    "load_split",
    "load_truth",
    "TRUTH_DIR",
]

TRUTH_DIR = "truth"

KIND_IMAGE, KIND_KSPACE, KIND_MASK = 0, 1, 2
_MAGIC = b"KRT1"
_HEADER = struct.Struct("<4sBII")

# (intensity, semi-axis a, semi-axis b, x0, y0, angle in degrees); modified Shepp-Logan
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
]


@dataclass(frozen=True)
class PhantomSpec:
    height: int
    width: int
    kind: Literal["shepp-logan", "random-ellipses"] = "shepp-logan"
    count: int = 5
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidInputError("phantom dimensions must be positive")
        if self.kind not in ("shepp-logan", "random-ellipses"):
            raise InvalidInputError(f"unknown phantom kind {self.kind!r}")
        if self.kind == "random-ellipses" and self.count < 1:
            raise InvalidInputError("random-ellipses needs count >= 1")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be non-negative")


@dataclass
class TrainSample:
    """An acquired (or refined) k-space target and the mask it lives on.

    ``loss_mask`` optionally narrows where the main loss term is scored
    (refined samples set it to the original acquisition mask); it must be a
    subset of ``omega`` and defaults to it.
    """

    target_k: np.ndarray
    omega: np.ndarray
    subject_id: str
    loss_mask: np.ndarray | None = None

    def __post_init__(self):
        self.target_k = as_image(self.target_k, "target_k")
        self.omega = as_mask(self.omega, self.target_k.shape)
        if np.any(self.target_k[~self.omega] != 0):
            raise InvalidInputError(f"sample {self.subject_id}: energy outside its mask")
        if self.loss_mask is not None:
            self.loss_mask = as_mask(self.loss_mask, self.omega.shape)
            if np.any(self.loss_mask & ~self.omega):
                raise InvalidInputError(f"sample {self.subject_id}: loss_mask not within omega")

    @property
    def scored(self) -> np.ndarray:
        return self.omega if self.loss_mask is None else self.loss_mask


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    path: str
    sha256: str
    split: str


def _grid(height, width):
    # pixel centres in [-1, 1]; row 0 is the top (y = +1)
    xs = (np.arange(width) + 0.5) / width * 2 - 1
    ys = 1 - (np.arange(height) + 0.5) / height * 2
    return np.meshgrid(xs, ys)


def _ellipse(xx, yy, a, b, x0, y0, angle_deg):
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    xr = (xx - x0) * c + (yy - y0) * s
    yr = -(xx - x0) * s + (yy - y0) * c
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def gen_phantom(spec: PhantomSpec) -> np.ndarray:
    xx, yy = _grid(spec.height, spec.width)
    img = np.zeros((spec.height, spec.width))
    if spec.kind == "shepp-logan":
        for val, a, b, x0, y0, ang in _SHEPP_LOGAN:
            img[_ellipse(xx, yy, a, b, x0, y0, ang)] += val
        img = np.clip(img, 0.0, None)
    else:
        rng = np.random.default_rng(spec.seed)
        for _ in range(spec.count):
            val = rng.uniform(0.2, 1.0)
            a, b = rng.uniform(0.1, 0.5, size=2)
            x0, y0 = rng.uniform(-0.5, 0.5, size=2)
            ang = rng.uniform(0.0, 180.0)
            img[_ellipse(xx, yy, a, b, x0, y0, ang)] = val
    return img.astype(np.complex128)


def simulate_acquisition(img, omega, noise_sigma: float = 0.0, seed: int = 0, subject_id: str = "") -> TrainSample:
    """Omega * (fft2c(img) + complex Gaussian noise), noise std per component."""
    x = as_image(img, "image")
    m = as_mask(omega, x.shape)
    k = fft2c(x)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        k = k + noise_sigma * (rng.standard_normal(k.shape) + 1j * rng.standard_normal(k.shape))
    return TrainSample(np.where(m, k, 0), m, subject_id)


# -- KRT1 tensor files -------------------------------------------------------------


def tensor_to_bytes(obj, kind: int | None = None) -> bytes:
    """Serialise an image/k-space (complex) or mask (bool) array.

    ``kind`` defaults to 2 for boolean arrays and 0 otherwise; pass 1 for k-space.
    """
    a = np.asarray(obj)
    if a.ndim != 2:
        raise DimensionError(f"tensors must be 2-D, got shape {a.shape}")
    if kind is None:
        kind = KIND_MASK if a.dtype == np.bool_ else KIND_IMAGE
    head = _HEADER.pack(_MAGIC, kind, a.shape[0], a.shape[1])
    if kind == KIND_MASK:
        return head + as_mask(a).astype(np.uint8).tobytes()
    if kind not in (KIND_IMAGE, KIND_KSPACE):
        raise InvalidInputError(f"unknown tensor kind {kind}")
    c = as_image(a)
    inter = np.empty(c.shape + (2,), dtype="<f8")
    inter[..., 0] = c.real
    inter[..., 1] = c.imag
    return head + inter.tobytes()


def tensor_from_bytes(blob: bytes):
    """Inverse of :func:`tensor_to_bytes`; returns ``(kind, array)``."""
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", offset=len(blob))
    magic, kind, h, w = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if kind not in (KIND_IMAGE, KIND_KSPACE, KIND_MASK):
        raise FormatError(f"unknown kind {kind}", offset=4)
    if h < 1 or w < 1:
        raise FormatError(f"invalid shape {h}x{w}", offset=5)
    itemsize = 1 if kind == KIND_MASK else 16
    expected = _HEADER.size + h * w * itemsize
    if len(blob) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(blob)}", offset=len(blob))
    if len(blob) > expected:
        raise FormatError("trailing bytes after payload", offset=expected)
    if kind == KIND_MASK:
        raw = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size).reshape(h, w)
        if np.any(raw > 1):
            bad = int(np.flatnonzero(raw.reshape(-1) > 1)[0])
            raise FormatError("mask bytes must be 0 or 1", offset=_HEADER.size + bad)
        return kind, raw.astype(bool)
    inter = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(h, w, 2)
    return kind, inter[..., 0] + 1j * inter[..., 1]


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, obj, kind: int | None = None) -> None:
    atomic_write(path, tensor_to_bytes(obj, kind))


def read_tensor(path):
    """Return the stored array (complex128 for kinds 0/1, bool for masks)."""
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())[1]


def sha256_file(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- manifests -------------------------------------------------------------------


def write_manifest(path, entries) -> None:
    text = "".join(f"{e.subject_id}\t{e.path}\t{e.sha256}\t{e.split}\n" for e in entries)
    atomic_write(path, text.encode())


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    offset = 0
    with open(path, "rb") as fh:
        raw = fh.read()
    for line in raw.decode().splitlines(keepends=True):
        fields = line.rstrip("\n").split("\t")
        if line.strip():
            if len(fields) != 4:
                raise FormatError(f"manifest line needs 4 tab-separated fields: {line!r}", offset=offset)
            entries.append(ManifestEntry(*fields))
        offset += len(line.encode())
    return entries


def verify_manifest(root, manifest="manifest.tsv") -> list[ManifestEntry]:
    """Check every hash and that no subject appears in two splits; return entries."""
    root = Path(root)
    entries = read_manifest(root / manifest)
    seen = {}
    for e in entries:
        if seen.setdefault(e.subject_id, e.split) != e.split:
            raise FormatError(f"subject {e.subject_id} appears in splits {seen[e.subject_id]} and {e.split}")
        actual = sha256_file(root / e.path)
        if actual != e.sha256:
            raise FormatError(f"hash mismatch for {e.path}: manifest {e.sha256}, file {actual}")
    return entries


def build_dataset(n_train: int, n_val: int, n_test: int, base: PhantomSpec, mask: MaskSpec, out_dir) -> list[ManifestEntry]:
    """Generate phantoms, acquisitions and ground truth; write files and manifests.

    Subject ``i`` (counted across train, val, test) uses phantom seed
    ``base.seed + i`` and mask seed ``mask.seed + i``.
    """
    if min(n_train, n_val, n_test) < 1:
        raise InvalidInputError("every split needs at least one subject")
    out = Path(out_dir)
    entries, mask_entries = [], []
    splits = [("train", n_train), ("val", n_val), ("test", n_test)]
    i = 0
    for split, n in splits:
        for j in range(n):
            sid = f"{split}_{j:04d}"
            img = gen_phantom(replace(base, seed=base.seed + i))
            omega = gen_omega(replace(mask, seed=mask.seed + i))
            sample = simulate_acquisition(img, omega, base.noise_sigma, derive_seed(base.seed, i, 7), sid)
            ksp_rel = f"{split}/{sid}.ksp.krt"
            mask_rel = f"{split}/{sid}.mask.krt"
            write_tensor(out / ksp_rel, sample.target_k, KIND_KSPACE)
            write_tensor(out / mask_rel, sample.omega)
            entries.append(ManifestEntry(sid, ksp_rel, sha256_file(out / ksp_rel), split))
            mask_entries.append(ManifestEntry(sid, mask_rel, sha256_file(out / mask_rel), split))
            if split != "train":
                write_tensor(out / TRUTH_DIR / f"{sid}.img.krt", img, KIND_IMAGE)
            i += 1
    write_manifest(out / "manifest.tsv", entries)
    write_manifest(out / "masks.tsv", mask_entries)
    return entries


def load_split(root, split: str) -> list[TrainSample]:
    """Load acquired samples of one split after a hash audit. Never touches ground truth."""
    root = Path(root)
    entries = [e for e in verify_manifest(root) if e.split == split]
    masks = {e.subject_id: e for e in verify_manifest(root, "masks.tsv") if e.split == split}
    samples = []
    for e in entries:
        k = read_tensor(root / e.path)
        m = read_tensor(root / masks[e.subject_id].path)
        samples.append(TrainSample(k, m, e.subject_id))
    return samples


def load_truth(root, subject_id: str) -> np.ndarray:
    return read_tensor(Path(root) / TRUTH_DIR / f"{subject_id}.img.krt")
