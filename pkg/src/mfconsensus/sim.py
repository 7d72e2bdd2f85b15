"""Synthetic rater studies, Monte Carlo split plans and patch sampling plans.

All randomness comes from one integer seed. Independent streams are derived
per entity with :func:`derived_rng`: the parts of the entity key are joined
with U+001F, hashed with SHA-256, and the first 8 digest bytes (big-endian)
are mixed with the seed through ``numpy.random.SeedSequence``. Ground truth
streams depend only on (seed, image); rater streams on (seed, rater, image).
The preset name is not part of any key, so two presets run with the same
seed see the same tissue and the same rater "personalities".
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .consensus import DEFAULT_RADIUS_UM
from .core import ImageMeta, Label, Point, PointAnnotation, canonical_order, dump_annotations, dumps
from .errors import ConfigError, InfeasibleError, RangeError, SaturationError, SchemaError


def derived_rng(seed: int, *key) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(str(k) for k in key).encode("utf-8")).digest()
    return np.random.default_rng(np.random.SeedSequence([int(seed), int.from_bytes(digest[:8], "big")]))


def synthetic_image(image_id: str, area_mm2: float = 2.37, mpp: float = 0.25) -> ImageMeta:
    """Square image covering roughly ``area_mm2`` of tissue."""
    side = round(math.sqrt(area_mm2 * 1e6) / mpp)
    return ImageMeta(image_id, side, side, mpp)


def _place_separated(
    rng: np.random.Generator,
    image: ImageMeta,
    n: int,
    min_sep_um: float,
    avoid: np.ndarray,
    max_tries: int,
) -> np.ndarray:
    """Uniform points at least ``min_sep_um`` from each other and from ``avoid``."""
    placed = []
    blockers = [tuple(p) for p in avoid]
    sep_px = min_sep_um / image.mpp
    tries = 0
    while len(placed) < n:
        if tries >= max_tries * max(n, 1):
            raise SaturationError(
                f"could only place {len(placed)} of {n} points {min_sep_um} um apart on {image.image_id!r}"
            )
        tries += 1
        x = rng.uniform(0, image.width_px)
        y = rng.uniform(0, image.height_px)
        if sep_px > 0 and any(math.hypot(x - bx, y - by) < sep_px for bx, by in blockers):
            continue
        placed.append((x, y))
        blockers.append((x, y))
    return np.array(placed, dtype=float).reshape(-1, 2)


def generate_ground_truth(
    image: ImageMeta,
    mf_density_per_mm2: float,
    seed: int,
    radius_um: float = DEFAULT_RADIUS_UM,
    max_tries: int = 1000,
) -> list[Point]:
    """Poisson number of MFs, uniform positions, pairwise >= 3 radii apart."""
    if mf_density_per_mm2 < 0:
        raise ConfigError("density must be non-negative")
    rng = derived_rng(seed, "gt", image.image_id)
    n = int(rng.poisson(mf_density_per_mm2 * image.area_mm2))
    xy = _place_separated(rng, image, n, 3 * radius_um, np.empty((0, 2)), max_tries)
    return [Point(image.image_id, float(x), float(y)) for x, y in xy]


@dataclass(frozen=True)
class RaterProfile:
    rater_id: str
    sensitivity: float
    fp_rate_per_mm2: float
    jitter_sigma_um: float = 0.0

    def __post_init__(self):
        if not 0 <= self.sensitivity <= 1:
            raise ConfigError(f"{self.rater_id}: sensitivity must be in [0, 1]")
        if self.fp_rate_per_mm2 < 0 or self.jitter_sigma_um < 0:
            raise ConfigError(f"{self.rater_id}: rates and jitter must be non-negative")


def simulate_rater(
    gt: Sequence[Point],
    profile: RaterProfile,
    image: ImageMeta,
    seed: int,
    radius_um: float = DEFAULT_RADIUS_UM,
    max_tries: int = 1000,
) -> list[PointAnnotation]:
    """One rater's annotations on one image.

    True MFs are kept with probability ``sensitivity`` and jittered; false
    positives are Poisson in number and placed at least 3 radii from every
    true MF.
    """
    rng = derived_rng(seed, "rater", profile.rater_id, image.image_id)
    pts = [p for p in gt if p.image_id == image.image_id]
    keep = rng.random(len(pts)) < profile.sensitivity
    jitter = rng.normal(0.0, 1.0, size=(len(pts), 2)) * (profile.jitter_sigma_um / image.mpp)
    gt_xy = np.array([(p.x_px, p.y_px) for p in pts], dtype=float).reshape(-1, 2)
    moved = (gt_xy + jitter)[keep]
    moved[:, 0] = np.clip(moved[:, 0], 0.0, float(image.width_px))
    moved[:, 1] = np.clip(moved[:, 1], 0.0, float(image.height_px))
    n_fp = int(rng.poisson(profile.fp_rate_per_mm2 * image.area_mm2))
    fp_xy = _place_fp(rng, image, n_fp, 3 * radius_um, gt_xy, max_tries)
    out = np.vstack([moved, fp_xy]).tolist()
    return [
        PointAnnotation(f"{image.image_id}/{profile.rater_id}/{i:04d}", profile.rater_id, image.image_id, x, y,
                        Label.HE_AND_PHH3)
        for i, (x, y) in enumerate(out)
    ]


def _place_fp(rng, image, n, min_sep_um, gt_xy, max_tries) -> np.ndarray:
    # false positives only need to avoid true MFs, not each other;
    # candidates are drawn in batches and kept in draw order
    sep_px = min_sep_um / image.mpp
    accepted = np.empty((0, 2))
    drawn = 0
    while len(accepted) < n:
        if drawn >= max_tries * n:
            raise SaturationError(f"no room for false positives on {image.image_id!r}")
        k = n - len(accepted)
        cand = np.column_stack([rng.uniform(0, image.width_px, k), rng.uniform(0, image.height_px, k)])
        drawn += k
        if len(gt_xy):
            d = np.hypot(cand[:, None, 0] - gt_xy[None, :, 0], cand[:, None, 1] - gt_xy[None, :, 1])
            cand = cand[d.min(axis=1) >= sep_px]
        accepted = np.vstack([accepted, cand])
    return accepted


def fp_rate_for_precision(sensitivity: float, density_per_mm2: float, precision: float) -> float:
    """Moment matching: expected FP/TP ratio equals (1 - precision) / precision."""
    if not 0 < precision <= 1:
        raise ConfigError("precision must be in (0, 1]")
    return sensitivity * density_per_mm2 * (1 - precision) / precision


@dataclass(frozen=True)
class StudyPreset:
    """Rater population for one study phase.

    Either ``profiles`` lists every rater explicitly, or they are drawn from
    the population parameters: each rater gets one standard-normal score per
    trait (shared across presets for the same seed), mapped to
    ``mean + sd * z`` and clipped.
    """

    name: str
    n_raters: int = 13
    sensitivity_mean: float = 0.77
    sensitivity_sd: float = 0.10
    precision_mean: float = 0.78
    precision_sd: float = 0.10
    jitter_sigma_um: float = 1.5
    mf_density_per_mm2: float = 10.0
    density_log_sd: float = 0.5
    seed: int = 0
    profiles: tuple[RaterProfile, ...] = ()

    def __post_init__(self):
        if self.n_raters < 2:
            raise ConfigError("a study needs at least 2 raters")
        if self.profiles and len(self.profiles) != self.n_raters:
            raise ConfigError("explicit profiles must match n_raters")

    def with_seed(self, seed: int) -> "StudyPreset":
        return replace(self, seed=seed)

    def rater_ids(self) -> list[str]:
        if self.profiles:
            return [p.rater_id for p in self.profiles]
        return [f"R{i + 1:02d}" for i in range(self.n_raters)]

    def resolve_profiles(self) -> tuple[RaterProfile, ...]:
        if self.profiles:
            return self.profiles
        out = []
        for rid in self.rater_ids():
            z_sens, z_prec = derived_rng(self.seed, "profile", rid).standard_normal(2)
            sens = float(np.clip(self.sensitivity_mean + self.sensitivity_sd * z_sens, 0.05, 1.0))
            prec = float(np.clip(self.precision_mean + self.precision_sd * z_prec, 0.2, 1.0))
            fp = fp_rate_for_precision(sens, self.mf_density_per_mm2, prec)
            out.append(RaterProfile(rid, sens, fp, self.jitter_sigma_um))
        return tuple(out)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profiles"] = [asdict(p) for p in self.resolve_profiles()]
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "StudyPreset":
        if not isinstance(doc, dict) or "name" not in doc:
            raise SchemaError("preset needs at least a 'name'")
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise SchemaError(f"unknown preset fields {sorted(extra)}")
        doc = dict(doc)
        profiles = doc.pop("profiles", None) or ()
        try:
            profs = tuple(RaterProfile(**p) for p in profiles)
        except TypeError as exc:
            raise SchemaError(f"bad rater profile: {exc}") from exc
        if profs and "n_raters" not in doc:
            doc["n_raters"] = len(profs)
        return cls(profiles=profs, **doc)


# Per-rater means from the two annotation phases (H&E only, then
# PHH3-assisted): recall 0.67 -> 0.77, precision 0.53 -> 0.78.
PRESETS = {
    "P1": StudyPreset("P1", sensitivity_mean=0.67, precision_mean=0.53),
    "P2": StudyPreset("P2", sensitivity_mean=0.77, precision_mean=0.78),
}


def get_preset(name: str) -> StudyPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class SimulatedStudy:
    images: tuple[ImageMeta, ...]
    annotations: tuple[PointAnnotation, ...]
    truth: tuple[Point, ...]
    profiles: tuple[RaterProfile, ...]

    def annotation_bytes(self) -> bytes:
        return dump_annotations(self.images, self.annotations)

    def truth_bytes(self) -> bytes:
        """Ground truth as a single-rater annotation document."""
        anns = [
            PointAnnotation(f"{p.image_id}/truth/{i:04d}", "truth", p.image_id, p.x_px, p.y_px, Label.HE_AND_PHH3)
            for i, p in enumerate(self.truth)
        ]
        return dump_annotations(self.images, anns)


def image_densities(preset: StudyPreset, images: Sequence[ImageMeta]) -> dict[str, float]:
    """Per-image MF density; log-normal spread models differing mitotic activity."""
    out = {}
    for im in images:
        z = derived_rng(preset.seed, "density", im.image_id).standard_normal()
        sd = preset.density_log_sd
        out[im.image_id] = preset.mf_density_per_mm2 * math.exp(sd * z - sd * sd / 2)
    return out


def simulate_study(
    preset: StudyPreset,
    images: Sequence[ImageMeta],
    radius_um: float = DEFAULT_RADIUS_UM,
) -> SimulatedStudy:
    profiles = preset.resolve_profiles()
    images = tuple(sorted(images, key=lambda im: im.image_id))
    dens = image_densities(preset, images)
    truth: list[Point] = []
    annotations: list[PointAnnotation] = []
    for im in images:
        gt = generate_ground_truth(im, dens[im.image_id], preset.seed, radius_um)
        truth.extend(gt)
        for prof in profiles:
            annotations.extend(simulate_rater(gt, prof, im, preset.seed, radius_um))
    return SimulatedStudy(images, tuple(canonical_order(annotations)), tuple(truth), profiles)


def study_images(n_images: int = 20, area_mm2: float = 2.37, mpp: float = 0.25) -> list[ImageMeta]:
    return [synthetic_image(f"img{i:03d}", area_mm2, mpp) for i in range(n_images)]


# -- split and patch planning -------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    fold_id: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    ratios: tuple[float, float, float]
    seed: int

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
        }


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    # exact decimal arithmetic: 0.70 * 10 must floor to 7, not 6
    fr = [Fraction(repr(float(r))) for r in ratios]
    n_train = math.floor(fr[0] * n)
    n_val = math.floor(fr[1] * n)
    return n_train, n_val, n - n_train - n_val


def monte_carlo_splits(
    case_ids: Iterable[str],
    ratios: Sequence[float] = (0.70, 0.15, 0.15),
    folds: int = 5,
    seed: int = 0,
) -> list[SplitPlan]:
    """Independent random train/val/test partitions (folds may overlap)."""
    cases = sorted(set(case_ids))
    ratios = tuple(float(r) for r in ratios)
    if len(cases) < 3:
        raise ConfigError("need at least 3 cases")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    if folds < 1:
        raise ConfigError("folds must be >= 1")
    n_train, n_val, _ = split_sizes(len(cases), ratios)
    plans = []
    for fold in range(folds):
        perm = derived_rng(seed, "split", fold).permutation(len(cases))
        shuffled = [cases[i] for i in perm]
        plans.append(
            SplitPlan(
                fold,
                tuple(sorted(shuffled[:n_train])),
                tuple(sorted(shuffled[n_train : n_train + n_val])),
                tuple(sorted(shuffled[n_train + n_val :])),
                ratios,
                seed,
            )
        )
    return plans


@dataclass(frozen=True)
class Patch:
    image_id: str
    x0: int
    y0: int
    size: int
    has_mf: bool


def points_in_patch(points: Iterable[Point], image_id: str, x0: int, y0: int, size: int) -> int:
    return sum(
        1 for p in points if p.image_id == image_id and x0 <= p.x_px <= x0 + size and y0 <= p.y_px <= y0 + size
    )


def patch_sampling_plan(
    images: Sequence[ImageMeta],
    points: Sequence[Point],
    patch_size_px: int = 512,
    mf_fraction: float = 0.5,
    n_patches: int = 100,
    seed: int = 0,
) -> list[Patch]:
    """Training patch rectangles, at least ``ceil(mf_fraction * n)`` of which
    contain a ground-truth point; the rest are placed uniformly."""
    if not 0 <= mf_fraction <= 1:
        raise ConfigError("mf_fraction must be in [0, 1]")
    if n_patches < 0 or patch_size_px < 1:
        raise ConfigError("n_patches must be >= 0 and patch size >= 1")
    images = sorted(images, key=lambda im: im.image_id)
    if not images:
        raise ConfigError("no images to sample from")
    for im in images:
        if im.width_px < patch_size_px or im.height_px < patch_size_px:
            raise RangeError(f"image {im.image_id!r} smaller than the {patch_size_px}px patch")
    index = {im.image_id: im for im in images}
    pts = [p for p in points if p.image_id in index]
    n_mf = math.ceil(Fraction(repr(float(mf_fraction))) * n_patches)
    if n_mf > 0 and not pts:
        raise InfeasibleError("MF patches requested but there are no ground-truth points")

    rng = derived_rng(seed, "patches")
    s = patch_size_px
    out = []
    for k in range(n_patches):
        if k < n_mf:
            p = pts[int(rng.integers(len(pts)))]
            im = index[p.image_id]
            x0 = int(rng.integers(max(0, math.ceil(p.x_px - s)), min(math.floor(p.x_px), im.width_px - s) + 1))
            y0 = int(rng.integers(max(0, math.ceil(p.y_px - s)), min(math.floor(p.y_px), im.height_px - s) + 1))
        else:
            im = images[int(rng.integers(len(images)))]
            x0 = int(rng.integers(0, im.width_px - s + 1))
            y0 = int(rng.integers(0, im.height_px - s + 1))
        out.append(Patch(im.image_id, x0, y0, s, points_in_patch(pts, im.image_id, x0, y0, s) > 0))
    return out


def patches_csv(patches: Iterable[Patch]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "x0", "y0", "size", "has_mf"])
    for p in patches:
        w.writerow([p.image_id, p.x0, p.y0, p.size, int(p.has_mf)])
    return buf.getvalue()


def splits_json(plans: Iterable[SplitPlan]) -> bytes:
    return dumps({"folds": [p.to_dict() for p in plans]})
