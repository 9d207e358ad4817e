"""The 16 anatomical validity checks for short-axis cardiac segmentation maps.

Structural checks (holes, fragment counts, adjacency) are parameter-free;
concavity and circularity compare a measured ratio against thresholds
calibrated from a reference corpus.  Foreground uses 8-connectivity,
holes (background) 4-connectivity, the standard duality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .segmap import BG, LV, MYO, RV, SegMap

_STRUCT_4 = ndi.generate_binary_structure(2, 1)
_STRUCT_8 = ndi.generate_binary_structure(2, 2)

CHECK_NAMES = (
    "hole_in_lv",
    "hole_in_rv",
    "hole_in_myo",
    "hole_between_lv_myo",
    "hole_between_rv_myo",
    "multiple_lv",
    "multiple_rv",
    "multiple_myo",
    "rv_disconnected_from_myo",
    "lv_touches_rv",
    "lv_touches_bg",
    "concavity_lv",
    "concavity_rv",
    "concavity_myo",
    "circularity_lv",
    "circularity_myo",
)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def connected_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label the components of a binary mask.

    Labels are assigned 1..count in order of each component's first pixel
    in a row-major scan, so the labeling is deterministic.
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = _STRUCT_8 if connectivity == 8 else _STRUCT_4
    raw, count = ndi.label(mask, structure=structure)
    if count <= 1:
        return raw, count
    flat = raw.ravel()
    nonzero = np.flatnonzero(flat)
    labels_at = flat[nonzero]
    uniq, first_idx = np.unique(labels_at, return_index=True)
    order = np.argsort(nonzero[first_idx], kind="stable")
    mapping = np.zeros(count + 1, dtype=raw.dtype)
    mapping[uniq[order]] = np.arange(1, count + 1)
    return mapping[raw], count


def component_count(mask: np.ndarray, connectivity: int = 8) -> int:
    structure = _STRUCT_8 if connectivity == 8 else _STRUCT_4
    _, count = ndi.label(mask, structure=structure)
    return count


def _enclosed_background(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Label ~mask with 4-connectivity; return (labels, ids not touching the border)."""
    lbl, count = ndi.label(~mask, structure=_STRUCT_4)
    if count == 0:
        return lbl, np.empty(0, dtype=lbl.dtype)
    border = np.concatenate([lbl[0, :], lbl[-1, :], lbl[:, 0], lbl[:, -1]])
    border_ids = np.unique(border[border > 0])
    all_ids = np.arange(1, count + 1, dtype=lbl.dtype)
    enclosed = np.setdiff1d(all_ids, border_ids, assume_unique=True)
    return lbl, enclosed


def count_holes(mask: np.ndarray) -> int:
    """Number of 4-connected background components fully enclosed by the mask."""
    _, enclosed = _enclosed_background(np.asarray(mask, dtype=bool))
    return int(enclosed.size)


def holes_between(mask_a: np.ndarray, mask_b: np.ndarray) -> int:
    """Enclosed background pockets of a|b that touch (8-adjacency) both masks."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    lbl, enclosed = _enclosed_background(a | b)
    if enclosed.size == 0:
        return 0
    near_a = np.unique(lbl[ndi.binary_dilation(a, structure=_STRUCT_8)])
    near_b = np.unique(lbl[ndi.binary_dilation(b, structure=_STRUCT_8)])
    touching_both = np.intersect1d(near_a, near_b, assume_unique=True)
    return int(np.intersect1d(enclosed, touching_both, assume_unique=True).size)


def touches(mask_a: np.ndarray, mask_b: np.ndarray) -> bool:
    """True iff some pixel of a is 8-adjacent to (or overlaps) some pixel of b."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if not a.any() or not b.any():
        return False
    return bool((ndi.binary_dilation(a, structure=_STRUCT_8) & b).any())


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counterclockwise, collinear points dropped."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def _boundary_pixels(mask: np.ndarray) -> np.ndarray:
    eroded = ndi.binary_erosion(mask, structure=_STRUCT_8, border_value=0)
    return np.argwhere(mask & ~eroded)


def _rasterized_hull_count(mask: np.ndarray) -> int:
    """Pixels whose centers lie inside or on the convex hull of the mask's pixel centers."""
    hull = _convex_hull(_boundary_pixels(mask).astype(np.float64))
    if len(hull) == 1:
        return 1
    r0, c0 = np.floor(hull.min(axis=0)).astype(int)
    r1, c1 = np.ceil(hull.max(axis=0)).astype(int)
    rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
    if len(hull) == 2:
        # Degenerate hull: pixel centers on the segment.
        p0, p1 = hull
        d = p1 - p0
        rel_r, rel_c = rr - p0[0], cc - p0[1]
        cross = rel_r * d[1] - rel_c * d[0]
        t = (rel_r * d[0] + rel_c * d[1]) / float(d @ d)
        on = (np.abs(cross) < 1e-9) & (t >= -1e-9) & (t <= 1 + 1e-9)
        return int(np.count_nonzero(on))
    inside = np.ones(rr.shape, dtype=bool)
    for i in range(len(hull)):
        a = hull[i]
        e = hull[(i + 1) % len(hull)] - a
        cross = e[0] * (cc - a[1]) - e[1] * (rr - a[0])
        inside &= cross >= -1e-9
    return int(np.count_nonzero(inside))


def convexity_ratio(mask: np.ndarray) -> float:
    """Filled area over rasterized-convex-hull area, in [0, 1]."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("convexity_ratio of an empty mask")
    filled = ndi.binary_fill_holes(mask)
    area = int(np.count_nonzero(filled))
    hull_area = _rasterized_hull_count(filled)
    return min(1.0, area / hull_area)


def circularity(mask: np.ndarray) -> float:
    """4*pi*A/P^2 of the filled silhouette, P counted as exterior unit edges.

    The staircase perimeter overestimates smooth contours, so even an ideal
    digital disk lands near pi^2/16 (~0.62) rather than 1; a square scores
    exactly pi/4.  Thresholds are calibrated under the same measure, which
    keeps the check consistent.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("circularity of an empty mask")
    filled = ndi.binary_fill_holes(mask)
    area = int(np.count_nonzero(filled))
    horizontal = int(np.count_nonzero(filled[:, 1:] & filled[:, :-1]))
    vertical = int(np.count_nonzero(filled[1:, :] & filled[:-1, :]))
    perimeter = 4 * area - 2 * (horizontal + vertical)
    return min(1.0, 4.0 * np.pi * area / perimeter**2)


# ---------------------------------------------------------------------------
# Thresholds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Thresholds:
    """Minimum acceptable concavity (convexity ratio) and circularity values."""

    concavity_min: dict[str, float] = field(
        default_factory=lambda: {"lv": 0.0, "rv": 0.0, "myo": 0.0}
    )
    circularity_min: dict[str, float] = field(default_factory=lambda: {"lv": 0.0, "myo": 0.0})

    def __post_init__(self) -> None:
        for group, keys in ((self.concavity_min, ("lv", "rv", "myo")), (self.circularity_min, ("lv", "myo"))):
            for key in keys:
                value = group[key]
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"threshold {key}={value} outside [0, 1]")

    @classmethod
    def permissive(cls) -> "Thresholds":
        """All-zero thresholds: only the structural checks can fail."""
        return cls()

    def to_json(self) -> str:
        return json.dumps(
            {"concavity_min": self.concavity_min, "circularity_min": self.circularity_min},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "Thresholds":
        data = json.loads(text)
        return cls(
            concavity_min={k: float(v) for k, v in data["concavity_min"].items()},
            circularity_min={k: float(v) for k, v in data["circularity_min"].items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Thresholds":
        return cls.from_json(Path(path).read_text())


def calibrate_thresholds(corpus: list[SegMap], margin: float = 0.05) -> Thresholds:
    """Set each threshold just below the corpus minimum (min * (1 - margin)).

    The corpus is assumed to be valid ground truth, so by construction every
    corpus map passes the calibrated thresholds.
    """
    if not corpus:
        raise ValueError("calibration corpus is empty")
    conc: dict[str, list[float]] = {"lv": [], "rv": [], "myo": []}
    circ: dict[str, list[float]] = {"lv": [], "myo": []}
    class_ids = {"lv": LV, "rv": RV, "myo": MYO}
    for segmap in corpus:
        for name, cid in class_ids.items():
            mask = segmap.mask(cid)
            if not mask.any():
                continue
            conc[name].append(convexity_ratio(mask))
            if name in circ:
                circ[name].append(circularity(mask))
    scale = 1.0 - margin
    return Thresholds(
        concavity_min={k: (min(v) * scale if v else 0.0) for k, v in conc.items()},
        circularity_min={k: (min(v) * scale if v else 0.0) for k, v in circ.items()},
    )


# ---------------------------------------------------------------------------
# The 16-check report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    value: float | None = None


@dataclass(frozen=True)
class AnatomyReport:
    checks: dict[str, CheckResult]

    def __post_init__(self) -> None:
        missing = set(CHECK_NAMES) - set(self.checks)
        if missing:
            raise ValueError(f"report missing checks: {sorted(missing)}")

    @property
    def is_valid(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def failed_checks(self) -> list[str]:
        return [name for name in CHECK_NAMES if not self.checks[name].passed]

    def to_json(self) -> str:
        return json.dumps(
            {
                "valid": self.is_valid,
                "checks": {
                    name: {"passed": c.passed, "value": c.value}
                    for name, c in self.checks.items()
                },
            },
            indent=1,
        )


def _hole_in_myo_count(myo: np.ndarray, lv: np.ndarray) -> int:
    """Enclosed pockets of the MYO mask, exempting any that hold LV pixels.

    The annular cavity around the LV is anatomy, not a defect; a gap between
    LV and MYO is reported by the dedicated hole-between check instead.
    """
    lbl, enclosed = _enclosed_background(myo)
    if enclosed.size == 0:
        return 0
    with_lv = np.unique(lbl[lv])
    return int(np.setdiff1d(enclosed, with_lv, assume_unique=True).size)


def evaluate_anatomy(segmap: SegMap, thresholds: Thresholds) -> AnatomyReport:
    """Run all 16 checks.  Checks about an absent class pass vacuously,
    except lv_touches_bg (needs only the LV) and rv_disconnected_from_myo
    (needs both RV and MYO)."""
    labels = segmap.labels
    lv = labels == LV
    rv = labels == RV
    myo = labels == MYO
    bg = labels == BG
    has = {"lv": bool(lv.any()), "rv": bool(rv.any()), "myo": bool(myo.any())}
    masks = {"lv": lv, "rv": rv, "myo": myo}

    checks: dict[str, CheckResult] = {}
    checks["hole_in_lv"] = CheckResult(count_holes(lv) == 0)
    checks["hole_in_rv"] = CheckResult(count_holes(rv) == 0)
    checks["hole_in_myo"] = CheckResult(_hole_in_myo_count(myo, lv) == 0)
    checks["hole_between_lv_myo"] = CheckResult(holes_between(lv, myo) == 0)
    checks["hole_between_rv_myo"] = CheckResult(holes_between(rv, myo) == 0)
    for name in ("lv", "rv", "myo"):
        checks[f"multiple_{name}"] = CheckResult(component_count(masks[name]) <= 1)
    checks["rv_disconnected_from_myo"] = CheckResult(
        touches(rv, myo) if (has["rv"] and has["myo"]) else True
    )
    checks["lv_touches_rv"] = CheckResult(not touches(lv, rv))
    checks["lv_touches_bg"] = CheckResult(not touches(lv, bg) if has["lv"] else True)
    for name in ("lv", "rv", "myo"):
        if has[name]:
            value = convexity_ratio(masks[name])
            checks[f"concavity_{name}"] = CheckResult(
                value >= thresholds.concavity_min[name], value
            )
        else:
            checks[f"concavity_{name}"] = CheckResult(True)
    for name in ("lv", "myo"):
        if has[name]:
            value = circularity(masks[name])
            checks[f"circularity_{name}"] = CheckResult(
                value >= thresholds.circularity_min[name], value
            )
        else:
            checks[f"circularity_{name}"] = CheckResult(True)
    return AnatomyReport(checks=checks)


def is_valid(segmap: SegMap, thresholds: Thresholds) -> bool:
    """Conjunction of the 16 checks, short-circuiting cheap checks first.

    Decision-equivalent to evaluate_anatomy(...).is_valid; this path exists
    because validity is the inner loop of sampling and repair.
    """
    labels = segmap.labels
    lv = labels == LV
    rv = labels == RV
    myo = labels == MYO
    has_lv, has_rv, has_myo = bool(lv.any()), bool(rv.any()), bool(myo.any())

    if component_count(lv) > 1 or component_count(rv) > 1 or component_count(myo) > 1:
        return False
    if touches(lv, rv):
        return False
    if has_lv and touches(lv, labels == BG):
        return False
    if has_rv and has_myo and not touches(rv, myo):
        return False
    if count_holes(lv) or count_holes(rv) or _hole_in_myo_count(myo, lv):
        return False
    if holes_between(lv, myo) or holes_between(rv, myo):
        return False
    for name, mask in (("lv", lv), ("rv", rv), ("myo", myo)):
        if mask.any() and convexity_ratio(mask) < thresholds.concavity_min[name]:
            return False
    for name, mask in (("lv", lv), ("myo", myo)):
        if mask.any() and circularity(mask) < thresholds.circularity_min[name]:
            return False
    return True
