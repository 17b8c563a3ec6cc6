"""Image-pair loading, [-1, 1] normalisation and sliding-window patch sets."""
from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, RegistrationError, VersionError

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
PRNG_NAME = "numpy.PCG64"
IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff")
# ITU-R BT.601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ImagePair:
    ir: np.ndarray
    vis: np.ndarray
    identifier: str = ""
    normalized: bool = False

    def __post_init__(self):
        if self.ir.shape != self.vis.shape:
            raise RegistrationError(
                f"pair {self.identifier!r}: infrared {_hw(self.ir)} and visible {_hw(self.vis)} sizes differ"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.ir.shape

    def as_normalized(self) -> "ImagePair":
        if self.normalized:
            return self
        return ImagePair(normalize(self.ir), normalize(self.vis), self.identifier, True)


def _hw(a: np.ndarray) -> str:
    return f"{a.shape[1]}x{a.shape[0]}" if a.ndim >= 2 else str(a.shape)


def read_gray(path) -> np.ndarray:
    """Decode an 8-bit grayscale or RGB raster to a 2-D uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
            raise DataError(f"{path}: {im.mode} rasters are not 8-bit; convert before fusing")
        if im.mode in ("L", "P", "1"):
            return np.asarray(im.convert("L"), dtype=np.uint8)
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    return to_luma(rgb)


def to_luma(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(rgb @ _LUMA), 0, 255).astype(np.uint8)


def load_pair(path_ir, path_vis, identifier: str | None = None) -> ImagePair:
    ir, vis = read_gray(path_ir), read_gray(path_vis)
    ident = identifier if identifier is not None else Path(path_ir).stem
    if ir.shape != vis.shape:
        raise RegistrationError(f"{path_ir} is {_hw(ir)} but {path_vis} is {_hw(vis)}")
    return ImagePair(ir, vis, ident)


def normalize(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def denormalize(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def patch_offsets(height: int, width: int, size: int = 128, stride: int = 12) -> list[tuple[int, int]]:
    if height < size or width < size:
        return []
    rows = range(0, (height - size) // stride * stride + 1, stride)
    cols = range(0, (width - size) // stride * stride + 1, stride)
    return [(r, c) for r in rows for c in cols]


def patch_count(height: int, width: int, size: int = 128, stride: int = 12) -> int:
    if height < size or width < size:
        return 0
    return ((height - size) // stride + 1) * ((width - size) // stride + 1)


@dataclass
class PatchSet(Sequence):
    """Patches addressed by ``(identifier, row, col)`` records over normalised source pairs.

    Patches are cut on access, so the set costs no more memory than its sources.
    """

    size: int = 128
    stride: int = 12
    seed: int | None = None
    sources: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        ident, r, c = self.records[i]
        pair = self.sources[ident]
        s = self.size
        return pair.ir[r:r + s, c:c + s], pair.vis[r:r + s, c:c + s]

    @property
    def patches(self) -> list:
        return list(self)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """Stack the given patches into ``(N, 1, size, size)`` float32 arrays."""
        irs, viss = zip(*(self[int(i)] for i in indices))
        return np.stack(irs)[:, None], np.stack(viss)[:, None]

    def identifiers(self, indices) -> list[str]:
        return [f"{self.records[int(i)][0]}@{self.records[int(i)][1]},{self.records[int(i)][2]}" for i in indices]

    def extend(self, other: "PatchSet") -> None:
        for ident, pair in other.sources.items():
            if ident in self.sources and self.sources[ident] is not pair:
                raise DataError(f"duplicate pair identifier {ident!r}")
            self.sources[ident] = pair
        self.records.extend(other.records)
        self.skipped.extend(other.skipped)

    def write_manifest(self, path) -> None:
        lines = [
            f"# format-version: {MANIFEST_VERSION}",
            f"# size: {self.size}",
            f"# stride: {self.stride}",
            f"# seed: {self.seed if self.seed is not None else 'none'}",
            f"# prng: {PRNG_NAME}",
        ]
        lines += [f"# skipped: {reason}" for reason in self.skipped]
        lines += [f"{ident}, {r}, {c}" for ident, r, c in self.records]
        Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[dict, list[tuple[str, int, int]]]:
    """Header fields and ``(identifier, row, col)`` records of a manifest file."""
    header, records = {}, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            key, value = key.strip(), value.strip()
            if key == "skipped":
                header.setdefault("skipped", []).append(value)
            else:
                header[key] = value
            continue
        ident, r, c = (t.strip() for t in line.rsplit(",", 2))
        records.append((ident, int(r), int(c)))
    version = int(header.get("format-version", -1))
    if version != MANIFEST_VERSION:
        raise VersionError(f"manifest format-version {version}, this library reads {MANIFEST_VERSION}")
    return header, records


def extract_patches(pair: ImagePair, size: int = 128, stride: int = 12) -> PatchSet:
    pair = pair.as_normalized()
    out = PatchSet(size=size, stride=stride)
    h, w = pair.shape
    if h < size or w < size:
        reason = f"{pair.identifier} ({w}x{h} smaller than {size}x{size})"
        log.warning("skipping %s", reason)
        out.skipped.append(reason)
        return out
    out.sources[pair.identifier] = pair
    out.records = [(pair.identifier, r, c) for r, c in patch_offsets(h, w, size, stride)]
    return out


_PAIR_RE = re.compile(r"^(?P<id>.+)_(?P<kind>ir|vis)$")


def find_pairs(directory) -> tuple[list[tuple[str, Path, Path]], list[Path]]:
    """Match ``<id>_ir.*`` with ``<id>_vis.*``; returns (pairs, unpaired files)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    found: dict[str, dict[str, Path]] = {}
    unpaired = []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        m = _PAIR_RE.match(p.stem)
        if not m:
            unpaired.append(p)
            continue
        found.setdefault(m["id"], {})[m["kind"]] = p
    pairs = []
    for ident in sorted(found):
        kinds = found[ident]
        if "ir" in kinds and "vis" in kinds:
            pairs.append((ident, kinds["ir"], kinds["vis"]))
        else:
            unpaired.extend(kinds.values())
    return pairs, unpaired


def shuffle_order(n: int, seed: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64(seed)).permutation(n)


def build_dataset(directory, shuffle_seed: int | None = 0, size: int = 128, stride: int = 12,
                  manifest_path=None) -> PatchSet:
    """Patch every pair in ``directory`` and shuffle the records globally."""
    pairs, unpaired = find_pairs(directory)
    out = PatchSet(size=size, stride=stride, seed=shuffle_seed)
    for p in unpaired:
        log.warning("unpaired file skipped: %s", p.name)
        out.skipped.append(f"{p.name} (unpaired)")
    for ident, p_ir, p_vis in pairs:
        out.extend(extract_patches(load_pair(p_ir, p_vis, ident), size, stride))
    if shuffle_seed is not None and out.records:
        order = shuffle_order(len(out.records), shuffle_seed)
        out.records = [out.records[i] for i in order]
    if manifest_path is not None:
        out.write_manifest(manifest_path)
    return out


def from_manifest(manifest_path, directory) -> PatchSet:
    """Rebuild a patch set exactly as recorded in a manifest."""
    header, records = read_manifest(manifest_path)
    pairs, _ = find_pairs(directory)
    by_id = {ident: (a, b) for ident, a, b in pairs}
    out = PatchSet(size=int(header["size"]), stride=int(header["stride"]),
                   seed=None if header["seed"] == "none" else int(header["seed"]),
                   skipped=list(header.get("skipped", [])))
    for ident in dict.fromkeys(r[0] for r in records):
        if ident not in by_id:
            raise DataError(f"manifest references missing pair {ident!r}")
        out.sources[ident] = load_pair(*by_id[ident], ident).as_normalized()
    out.records = list(records)
    return out


def patchset_from_arrays(pairs, size: int, stride: int | None = None) -> PatchSet:
    """Patch set over in-memory ``(identifier, ir_uint8, vis_uint8)`` triples."""
    out = PatchSet(size=size, stride=stride or size)
    for ident, ir, vis in pairs:
        out.extend(extract_patches(ImagePair(ir, vis, ident), size, out.stride))
    return out
