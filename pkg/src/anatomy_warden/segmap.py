"""Segmentation map data model, file I/O, and runtime registration.

A map is a square grid of class labels (0=background, 1=RV, 2=MYO, 3=LV)
with physical pixel spacing and slice metadata.  Files are stored as
binary PGM (maxval 3) plus a JSON sidecar carrying the metadata.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

BG, RV, MYO, LV = 0, 1, 2, 3
CLASS_NAMES = {BG: "bg", RV: "rv", MYO: "myo", LV: "lv"}
FOREGROUND_CLASSES = (RV, MYO, LV)
PHASES = ("ED", "ES", "NONE")

#: Azimuth (degrees, atan2(drow, dcol) convention) the RV centroid is rotated
#: to when rotation registration is enabled.  180 puts the RV due left of
#: the LV, the conventional short-axis orientation.
DEFAULT_RV_ANGLE_DEG = 180.0


class SegmapError(Exception):
    """Base class for segmentation-map I/O and registration failures."""


class HeaderError(SegmapError):
    """Malformed or unsupported PGM header / sidecar / manifest content."""


class LabelRangeError(SegmapError):
    """Pixel byte outside the allowed label set {0, 1, 2, 3}."""


class SidecarMissingError(SegmapError):
    """The JSON sidecar next to a PGM file does not exist."""


class RegistrationError(SegmapError):
    """A shift would push nonzero pixels off the grid border."""


@dataclass(frozen=True)
class SegMap:
    """One short-axis slice: label grid plus physical/slice metadata."""

    labels: np.ndarray
    spacing_mm: tuple[float, float] = (1.0, 1.0)
    slice_index: int = 0
    num_slices: int = 1
    phase: str = "NONE"

    def __post_init__(self) -> None:
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.ndim != 2 or labels.shape[0] != labels.shape[1]:
            raise HeaderError(f"label grid must be square 2-D, got shape {labels.shape}")
        if labels.size and labels.max() > LV:
            raise LabelRangeError(f"label out of range: {int(labels.max())} > {LV}")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        if self.phase not in PHASES:
            raise HeaderError(f"unknown phase {self.phase!r}")
        if not (0 <= self.slice_index < self.num_slices):
            raise HeaderError(
                f"slice_index {self.slice_index} out of range for {self.num_slices} slices"
            )
        if any(s <= 0 for s in self.spacing_mm):
            raise HeaderError(f"non-positive spacing {self.spacing_mm}")

    @property
    def grid_size(self) -> int:
        return self.labels.shape[0]

    def mask(self, class_id: int) -> np.ndarray:
        return self.labels == class_id

    def with_labels(self, labels: np.ndarray) -> "SegMap":
        """Same metadata, new grid."""
        return replace(self, labels=labels)


@dataclass(frozen=True)
class Transform:
    """Registration transform: integer pixel shift, then optional rotation."""

    shift: tuple[int, int] = (0, 0)
    rotation_deg: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.shift == (0, 0) and self.rotation_deg == 0.0


@dataclass(frozen=True)
class VolumeManifest:
    """Ordered slice files for one patient/phase."""

    slices: list[str]
    slice_thickness_mm: float
    spacing_mm: tuple[float, float]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_PGM_MAGIC = b"P5"
_PGM_MAXVAL = 3


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_segmap(segmap: SegMap, path: str | Path) -> None:
    """Write binary PGM (maxval 3) plus the JSON metadata sidecar."""
    path = Path(path)
    n = segmap.grid_size
    header = f"P5\n{n} {n}\n{_PGM_MAXVAL}\n".encode("ascii")
    path.write_bytes(header + segmap.labels.tobytes())
    sidecar = {
        "spacing_mm": [float(segmap.spacing_mm[0]), float(segmap.spacing_mm[1])],
        "slice_index": segmap.slice_index,
        "num_slices": segmap.num_slices,
        "phase": segmap.phase,
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=1))


def _parse_pgm(data: bytes, path: Path) -> np.ndarray:
    if not data.startswith(_PGM_MAGIC):
        raise HeaderError(f"{path}: not a P5 PGM file")
    # Tokenize the header: magic, width, height, maxval.  '#' starts a
    # comment running to end of line; a single whitespace byte separates
    # the maxval from the raster.
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise HeaderError(f"{path}: truncated PGM header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError as exc:
            raise HeaderError(f"{path}: bad header token {data[start:pos]!r}") from exc
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = tokens
    if maxval != _PGM_MAXVAL:
        raise HeaderError(f"{path}: expected maxval {_PGM_MAXVAL}, got {maxval}")
    if width != height or width <= 0:
        raise HeaderError(f"{path}: grid must be square, got {width}x{height}")
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise HeaderError(f"{path}: raster truncated")
    labels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    if labels.max(initial=0) > LV:
        raise LabelRangeError(f"{path}: label out of range ({int(labels.max())})")
    return labels


def load_segmap(path: str | Path) -> SegMap:
    """Read a PGM+sidecar pair back into a SegMap."""
    path = Path(path)
    labels = _parse_pgm(path.read_bytes(), path)
    sidecar_path = _sidecar_path(path)
    if not sidecar_path.exists():
        raise SidecarMissingError(f"missing sidecar {sidecar_path}")
    try:
        meta = json.loads(sidecar_path.read_text())
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        segmap = SegMap(
            labels=labels,
            spacing_mm=spacing,  # type: ignore[arg-type]
            slice_index=int(meta["slice_index"]),
            num_slices=int(meta["num_slices"]),
            phase=str(meta["phase"]),
        )
    except LabelRangeError:
        raise
    except SegmapError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"{sidecar_path}: bad sidecar ({exc})") from exc
    return segmap


def save_volume_manifest(manifest: VolumeManifest, path: str | Path) -> None:
    payload = {
        "slices": list(manifest.slices),
        "slice_thickness_mm": manifest.slice_thickness_mm,
        "spacing_mm": list(manifest.spacing_mm),
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_volume_manifest(path: str | Path) -> VolumeManifest:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
        manifest = VolumeManifest(
            slices=[str(s) for s in meta["slices"]],
            slice_thickness_mm=float(meta["slice_thickness_mm"]),
            spacing_mm=tuple(float(s) for s in meta["spacing_mm"]),  # type: ignore[arg-type]
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: bad volume manifest ({exc})") from exc
    if not manifest.slices:
        raise HeaderError(f"{path}: empty volume manifest")
    return manifest


def load_volume(manifest_path: str | Path) -> list[SegMap]:
    """Load all slices of a volume manifest, order preserved."""
    manifest_path = Path(manifest_path)
    manifest = load_volume_manifest(manifest_path)
    base = manifest_path.parent
    slices = []
    for rel in manifest.slices:
        p = Path(rel)
        slices.append(load_segmap(p if p.is_absolute() else base / p))
    sizes = {s.grid_size for s in slices}
    if len(sizes) > 1:
        raise HeaderError(f"{manifest_path}: inconsistent grid sizes {sorted(sizes)}")
    return slices


# ---------------------------------------------------------------------------
# Registration
# ---------------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def translate(labels: np.ndarray, shift: tuple[int, int], *, strict: bool = True) -> np.ndarray:
    """Shift a label grid by whole pixels, zero-filling exposed cells.

    With strict=True any nonzero pixel pushed past the border raises
    RegistrationError, which keeps translation a bijection on content.
    """
    dr, dc = shift
    n = labels.shape[0]
    if abs(dr) >= n or abs(dc) >= n:
        if strict and labels.any():
            raise RegistrationError(f"shift {shift} moves content off a {n}x{n} grid")
        return np.zeros_like(labels)
    out = np.zeros_like(labels)
    src_r = slice(max(0, -dr), min(n, n - dr))
    src_c = slice(max(0, -dc), min(n, n - dc))
    dst_r = slice(max(0, dr), min(n, n + dr))
    dst_c = slice(max(0, dc), min(n, n + dc))
    out[dst_r, dst_c] = labels[src_r, src_c]
    if strict and int(np.count_nonzero(out)) != int(np.count_nonzero(labels)):
        raise RegistrationError(f"shift {shift} crops nonzero pixels")
    return out


def _centroid(mask: np.ndarray) -> tuple[float, float] | None:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return float(rows.mean()), float(cols.mean())


def _rotate_labels(labels: np.ndarray, angle_deg: float) -> np.ndarray:
    # Nearest-neighbor, fixed frame; the rotation pivot is the array center.
    return ndi.rotate(
        labels, angle_deg, reshape=False, order=0, mode="constant", cval=0, prefilter=False
    )


def register(
    segmap: SegMap,
    *,
    rotation: bool = False,
    rv_angle_deg: float = DEFAULT_RV_ANGLE_DEG,
) -> tuple[SegMap, Transform]:
    """Center the LV on the grid; optionally rotate the RV to a canonical azimuth.

    Degenerate maps (no LV) pass through with the identity transform.
    Default is translation-only, which is exactly invertible.
    """
    center = (segmap.grid_size // 2, segmap.grid_size // 2)
    lv_centroid = _centroid(segmap.mask(LV))
    if lv_centroid is None:
        return segmap, Transform()
    shift = (
        center[0] - _round_half_up(lv_centroid[0]),
        center[1] - _round_half_up(lv_centroid[1]),
    )
    labels = translate(segmap.labels, shift, strict=True)

    rotation_deg = 0.0
    if rotation:
        rv_centroid = _centroid(labels == RV)
        lv_c = _centroid(labels == LV)
        if rv_centroid is not None and lv_c is not None:
            current = math.degrees(
                math.atan2(rv_centroid[0] - lv_c[0], rv_centroid[1] - lv_c[1])
            )
            rotation_deg = rv_angle_deg - current
            if abs(rotation_deg) > 1e-9:
                labels = _rotate_labels(labels, rotation_deg)
    return segmap.with_labels(labels), Transform(shift=shift, rotation_deg=rotation_deg)


def unregister(segmap: SegMap, transform: Transform) -> SegMap:
    """Invert a registration transform.

    Pure translations invert bit-exactly; rotations invert through
    nearest-neighbor resampling and are therefore lossy.
    """
    labels = segmap.labels
    if transform.rotation_deg != 0.0:
        labels = _rotate_labels(labels, -transform.rotation_deg)
    labels = translate(labels, (-transform.shift[0], -transform.shift[1]), strict=True)
    return segmap.with_labels(labels)
