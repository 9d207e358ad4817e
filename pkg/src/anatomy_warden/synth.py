"""Deterministic synthetic short-axis shapes and targeted corruption operators.

The generator rasterizes an LV disk, a concentric MYO ring, and an RV
ring-sector attached to the MYO outer wall.  Each corruption kind breaks
exactly one family of validity checks, which makes repair experiments
attributable check by check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .anatomy import Thresholds, is_valid
from .segmap import BG, LV, MYO, RV, SegMap, VolumeManifest, save_segmap, save_volume_manifest

CORRUPTION_KINDS = (
    "hole_lv",
    "hole_rv",
    "hole_myo",
    "gap_lv_myo",
    "split_rv",
    "split_lv",
    "myo_break",
    "lv_rv_bridge",
    "spurious_blob",
    "concave_bite",
)

#: Check each corruption kind is built to break (on a canonical valid shape).
TARGET_CHECK = {
    "hole_lv": "hole_in_lv",
    "hole_rv": "hole_in_rv",
    "hole_myo": "hole_in_myo",
    "gap_lv_myo": "hole_between_lv_myo",
    "split_rv": "multiple_rv",
    "split_lv": "multiple_lv",
    "myo_break": "multiple_myo",
    "lv_rv_bridge": "lv_touches_rv",
    "spurious_blob": "multiple_rv",
    "concave_bite": "concavity_lv",
}

_KIND_TARGET_CLASS = {
    "hole_lv": LV,
    "hole_rv": RV,
    "hole_myo": MYO,
    "gap_lv_myo": MYO,
    "split_rv": RV,
    "split_lv": LV,
    "myo_break": MYO,
    "lv_rv_bridge": RV,
    "spurious_blob": RV,
    "concave_bite": LV,
}


@dataclass(frozen=True)
class ShapeParams:
    lv_radius_px: float = 10.0
    myo_thickness_px: float = 4.0
    rv_angular_extent_deg: float = 160.0
    rv_thickness_px: float = 5.5
    center_jitter_px: float = 5.0
    slice_taper: float = 0.25

    def __post_init__(self) -> None:
        if min(self.lv_radius_px, self.myo_thickness_px, self.rv_thickness_px) < 2.0:
            raise ValueError("radii and thicknesses must be >= 2 px")
        if not 0.0 <= self.slice_taper < 1.0:
            raise ValueError("slice_taper must be in [0, 1)")

    def max_extent_px(self) -> float:
        return self.lv_radius_px + self.myo_thickness_px + self.rv_thickness_px

    def validate_for_grid(self, grid_size: int) -> None:
        if self.max_extent_px() + self.center_jitter_px > grid_size / 2 - 2:
            raise ValueError(
                f"shape extent {self.max_extent_px():.1f}+jitter does not fit a "
                f"{grid_size} grid with 2 px margin"
            )


@dataclass(frozen=True)
class ParamRanges:
    """Uniform sampling ranges for ShapeParams fields."""

    lv_radius_px: tuple[float, float] = (7.0, 12.0)
    myo_thickness_px: tuple[float, float] = (3.0, 5.0)
    rv_angular_extent_deg: tuple[float, float] = (120.0, 200.0)
    rv_thickness_px: tuple[float, float] = (4.5, 6.5)
    center_jitter_px: float = 5.0
    slice_taper: tuple[float, float] = (0.1, 0.35)

    @classmethod
    def default_for_grid(cls, grid_size: int) -> "ParamRanges":
        s = grid_size / 64.0
        return cls(
            lv_radius_px=(7.0 * s, 12.0 * s),
            myo_thickness_px=(3.0 * s, 5.0 * s),
            rv_thickness_px=(4.5 * s, 6.5 * s),
            center_jitter_px=5.0 * s,
        )

    def sample(self, rng: np.random.Generator) -> ShapeParams:
        def pick(lo_hi: tuple[float, float]) -> float:
            return float(rng.uniform(*lo_hi))

        return ShapeParams(
            lv_radius_px=pick(self.lv_radius_px),
            myo_thickness_px=pick(self.myo_thickness_px),
            rv_angular_extent_deg=pick(self.rv_angular_extent_deg),
            rv_thickness_px=pick(self.rv_thickness_px),
            center_jitter_px=self.center_jitter_px,
            slice_taper=pick(self.slice_taper),
        )


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    magnitude_px: int = 3
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.magnitude_px < 1:
            raise ValueError("magnitude_px must be >= 1")


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

#: Slices deeper than this normalized position are "apical" and carry no RV.
APICAL_RV_CUTOFF = 0.85


def _slice_position(slice_index: int, num_slices: int) -> float:
    return slice_index / (num_slices - 1) if num_slices > 1 else 0.0


def _rasterize(
    grid_size: int,
    center: tuple[float, float],
    r_lv: float,
    myo_t: float,
    rv_t: float,
    rv_extent_deg: float,
    rv_dir_deg: float,
    include_rv: bool,
) -> np.ndarray:
    rr, cc = np.indices((grid_size, grid_size), dtype=np.float64)
    d = np.hypot(rr - center[0], cc - center[1])
    r_out = r_lv + myo_t
    labels = np.zeros((grid_size, grid_size), dtype=np.uint8)
    labels[d <= r_out] = MYO
    labels[d <= r_lv] = LV
    if include_rv:
        ang = np.degrees(np.arctan2(rr - center[0], cc - center[1]))
        delta = np.abs((ang - rv_dir_deg + 180.0) % 360.0 - 180.0)
        rv_band = (d > r_out) & (d <= r_out + rv_t) & (delta <= rv_extent_deg / 2.0)
        labels[rv_band] = RV
    return labels


def generate_valid(
    params: ShapeParams,
    rng: np.random.Generator,
    *,
    grid_size: int = 64,
    slice_index: int = 0,
    num_slices: int = 1,
    phase: str = "NONE",
    spacing_mm: tuple[float, float] = (1.4, 1.4),
    max_attempts: int = 100,
) -> SegMap:
    """Rasterize one anatomically valid slice; retries jitter until the
    structural checks pass (threshold checks are calibrated downstream)."""
    params.validate_for_grid(grid_size)
    pos = _slice_position(slice_index, num_slices)
    scale = 1.0 - params.slice_taper * pos
    include_rv = pos <= APICAL_RV_CUTOFF
    permissive = Thresholds.permissive()
    half = grid_size / 2.0
    for _ in range(max_attempts):
        jr = rng.uniform(-params.center_jitter_px, params.center_jitter_px)
        jc = rng.uniform(-params.center_jitter_px, params.center_jitter_px)
        # Half-pixel offsets keep circle boundaries off exact pixel centers.
        center = (half + jr + rng.uniform(0.25, 0.75), half + jc + rng.uniform(0.25, 0.75))
        rv_dir = 180.0 + rng.uniform(-20.0, 20.0)
        labels = _rasterize(
            grid_size,
            center,
            r_lv=max(2.5, params.lv_radius_px * scale),
            myo_t=max(2.5, params.myo_thickness_px * min(1.0, scale + 0.2)),
            rv_t=max(2.5, params.rv_thickness_px * scale),
            rv_extent_deg=params.rv_angular_extent_deg,
            rv_dir_deg=rv_dir,
            include_rv=include_rv,
        )
        segmap = SegMap(
            labels=labels,
            spacing_mm=spacing_mm,
            slice_index=slice_index,
            num_slices=num_slices,
            phase=phase,
        )
        if is_valid(segmap, permissive):
            return segmap
    raise RuntimeError(f"no valid shape after {max_attempts} attempts (params={params})")


def generate_corpus(
    n: int,
    ranges: ParamRanges,
    rng: np.random.Generator,
    *,
    grid_size: int = 64,
    out_dir: str | Path | None = None,
) -> list[SegMap]:
    """n valid maps with randomized shape params and slice metadata.

    When out_dir is given, maps are written as NNNNN.pgm plus sidecars and
    a corpus.json listing (relative paths, generation order).
    """
    maps: list[SegMap] = []
    for _ in range(n):
        params = ranges.sample(rng)
        num_slices = int(rng.integers(6, 13))
        slice_index = int(rng.integers(0, num_slices))
        phase = "ED" if rng.random() < 0.5 else "ES"
        maps.append(
            generate_valid(
                params,
                rng,
                grid_size=grid_size,
                slice_index=slice_index,
                num_slices=num_slices,
                phase=phase,
            )
        )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = []
        for i, segmap in enumerate(maps):
            name = f"{i:05d}.pgm"
            save_segmap(segmap, out / name)
            names.append(name)
        (out / "corpus.json").write_text(json.dumps({"maps": names}, indent=1))
    return maps


def generate_volume(
    params: ShapeParams,
    num_slices: int,
    rng: np.random.Generator,
    *,
    grid_size: int = 64,
    phase: str = "ED",
    spacing_mm: tuple[float, float] = (1.4, 1.4),
    slice_thickness_mm: float = 10.0,
    out_dir: str | Path | None = None,
    stem: str = "volume",
) -> list[SegMap]:
    """One patient/phase volume, apex-tapered; optionally written with a manifest."""
    slices = [
        generate_valid(
            params,
            rng,
            grid_size=grid_size,
            slice_index=i,
            num_slices=num_slices,
            phase=phase,
            spacing_mm=spacing_mm,
        )
        for i in range(num_slices)
    ]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = []
        for i, segmap in enumerate(slices):
            name = f"{stem}_{i:03d}.pgm"
            save_segmap(segmap, out / name)
            names.append(name)
        manifest = VolumeManifest(
            slices=names, slice_thickness_mm=slice_thickness_mm, spacing_mm=spacing_mm
        )
        save_volume_manifest(manifest, out / f"{stem}.volume.json")
    return slices


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------


def _interior_center(mask: np.ndarray, rng: np.random.Generator) -> tuple[tuple[int, int], float]:
    """Deepest-interior pixel of a mask and its distance to the outside."""
    edt = ndi.distance_transform_edt(mask)
    depth = float(edt.max())
    candidates = np.argwhere(edt >= depth - 0.5)
    r, c = candidates[rng.integers(0, len(candidates))]
    return (int(r), int(c)), depth


def _disk(shape: tuple[int, int], center: tuple[float, float], radius: float) -> np.ndarray:
    rr, cc = np.indices(shape, dtype=np.float64)
    return np.hypot(rr - center[0], cc - center[1]) <= radius


def _ray_band(
    shape: tuple[int, int], origin: tuple[float, float], angle_deg: float, width: float
) -> np.ndarray:
    """Pixels within width/2 of the ray leaving origin at angle_deg."""
    rr, cc = np.indices(shape, dtype=np.float64)
    dr = np.sin(np.radians(angle_deg))
    dc = np.cos(np.radians(angle_deg))
    rel_r, rel_c = rr - origin[0], cc - origin[1]
    along = rel_r * dr + rel_c * dc
    across = np.abs(rel_r * dc - rel_c * dr)
    return (along >= 0) & (across <= width / 2.0)


def corrupt(segmap: SegMap, spec: CorruptionSpec) -> SegMap:
    """Apply one corruption; the result fails at least TARGET_CHECK[spec.kind]."""
    rng = np.random.default_rng(spec.rng_seed)
    labels = segmap.labels.copy()
    shape = labels.shape
    target_class = _KIND_TARGET_CLASS[spec.kind]
    if not (labels == target_class).any():
        raise ValueError(f"corruption {spec.kind!r} needs class {target_class}, absent from map")
    mag = float(spec.magnitude_px)
    lv = labels == LV
    rv = labels == RV
    myo = labels == MYO

    if spec.kind in ("hole_lv", "hole_rv", "hole_myo"):
        mask = {LV: lv, RV: rv, MYO: myo}[target_class]
        center, depth = _interior_center(mask, rng)
        radius = max(1.0, min(mag, depth - 1.5))
        labels[_disk(shape, center, radius) & mask] = BG
    elif spec.kind == "gap_lv_myo":
        dist_from_lv = ndi.distance_transform_edt(~lv)
        gap = min(mag, 2.0)  # keep the ring itself intact
        labels[myo & (dist_from_lv <= gap)] = BG
    elif spec.kind in ("split_rv", "myo_break"):
        mask = rv if spec.kind == "split_rv" else myo
        origin = tuple(np.argwhere(lv).mean(axis=0)) if lv.any() else tuple(
            np.argwhere(mask).mean(axis=0)
        )
        target = np.argwhere(mask)[rng.integers(0, int(mask.sum()))]
        angle = np.degrees(np.arctan2(target[0] - origin[0], target[1] - origin[1]))
        labels[mask & _ray_band(shape, origin, float(angle), max(2.0, mag))] = BG
    elif spec.kind == "split_lv":
        rows, cols = np.nonzero(lv)
        cut_col = float(cols.mean())
        band = np.abs(np.indices(shape)[1] - cut_col) <= max(1.0, mag) / 2.0
        labels[lv & band] = BG
    elif spec.kind == "lv_rv_bridge":
        lv_c = np.argwhere(lv).mean(axis=0)
        rv_c = np.argwhere(rv).mean(axis=0)
        rr, cc = np.indices(shape, dtype=np.float64)
        d = rv_c - lv_c
        norm2 = float(d @ d)
        t = ((rr - lv_c[0]) * d[0] + (cc - lv_c[1]) * d[1]) / norm2
        across = np.abs((rr - lv_c[0]) * d[1] - (cc - lv_c[1]) * d[0]) / np.sqrt(norm2)
        corridor = (t >= 0) & (t <= 1) & (across <= max(1.0, mag) / 2.0)
        labels[corridor & ~rv] = LV
    elif spec.kind == "spurious_blob":
        foreground = labels != BG
        free = ndi.distance_transform_edt(~foreground)
        free[free < mag + 2.0] = 0
        if not free.any():
            raise ValueError("no free background for spurious_blob")
        candidates = np.argwhere(free > 0)
        r, c = candidates[rng.integers(0, len(candidates))]
        labels[_disk(shape, (int(r), int(c)), mag)] = RV
    elif spec.kind == "concave_bite":
        boundary = lv & ~ndi.binary_erosion(lv, border_value=0)
        pts = np.argwhere(boundary)
        r, c = pts[rng.integers(0, len(pts))]
        labels[_disk(shape, (int(r), int(c)), mag) & lv] = BG
    return segmap.with_labels(labels)


def random_corruption(rng: np.random.Generator, *, scale: float = 1.0) -> CorruptionSpec:
    """Uniformly pick a kind with a kind-appropriate magnitude."""
    kind = CORRUPTION_KINDS[int(rng.integers(0, len(CORRUPTION_KINDS)))]
    base = {
        "hole_lv": (2, 4),
        "hole_rv": (1, 2),
        "hole_myo": (1, 2),
        "gap_lv_myo": (1, 2),
        "split_rv": (2, 4),
        "split_lv": (2, 4),
        "myo_break": (2, 4),
        "lv_rv_bridge": (2, 4),
        "spurious_blob": (2, 4),
        "concave_bite": (5, 8),
    }[kind]
    lo = max(1, round(base[0] * scale))
    hi = max(lo + 1, round(base[1] * scale) + 1)
    magnitude = int(rng.integers(lo, hi))
    return CorruptionSpec(kind=kind, magnitude_px=magnitude, rng_seed=int(rng.integers(0, 2**31)))
