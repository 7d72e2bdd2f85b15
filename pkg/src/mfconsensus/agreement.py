"""Object-level agreement against leave-one-out consensus, count ICC, and
consensus-threshold sweeps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .consensus import ClusterIndex, ConsensusConfig, ConsensusSet
from .core import ImageMeta, PointAnnotation, filter_labels
from .errors import ConfigError, DegenerateError, ImageReferenceError, UnknownRaterError


@dataclass(frozen=True)
class MatchPair:
    left: int
    right: int
    distance_um: float


@dataclass(frozen=True)
class Matching:
    """One-to-one pairing; ``left``/``right`` are indices into the inputs."""

    pairs: tuple[MatchPair, ...]
    unmatched_left: tuple[int, ...]
    unmatched_right: tuple[int, ...]

    @property
    def tp(self) -> int:
        return len(self.pairs)


def _coords(points) -> tuple[list[str], np.ndarray]:
    return [p.image_id for p in points], np.array([(p.x_px, p.y_px) for p in points], dtype=float).reshape(-1, 2)


def _greedy_pairs(
    l_img: Sequence[str],
    lxy: np.ndarray,
    r_img: Sequence[str],
    rxy: np.ndarray,
    images: Mapping[str, ImageMeta],
    radius_um: float,
) -> list[tuple[float, int, int]]:
    """Greedy one-to-one pairs ``(distance_um, left, right)``, shortest first,
    ties broken by left then right index."""
    if len(lxy) == 0 or len(rxy) == 0:
        return []
    codes: dict[str, int] = {}
    mpp = []
    for image_id in [*dict.fromkeys(l_img), *dict.fromkeys(r_img)]:
        if image_id not in codes:
            if image_id not in images:
                raise ImageReferenceError(f"unknown image_id {image_id!r}")
            codes[image_id] = len(codes)
            mpp.append(images[image_id].mpp)
    mpp = np.array(mpp)
    lc = np.array([codes[i] for i in l_img])
    rc = np.array([codes[i] for i in r_img])
    # candidate search in one micrometer plane with images shifted apart;
    # the exact per-image distance below decides admissibility
    lum = lxy * mpp[lc][:, None]
    rum = rxy * mpp[rc][:, None]
    shift = max(lum[:, 0].max(), rum[:, 0].max()) + 10 * radius_um
    lum[:, 0] += lc * shift
    rum[:, 0] += rc * shift
    near = cKDTree(lum).sparse_distance_matrix(cKDTree(rum), radius_um * (1 + 1e-6), output_type="ndarray")
    ii = near["i"].astype(np.intp)
    jj = near["j"].astype(np.intp)
    same = lc[ii] == rc[jj]
    ii, jj = ii[same], jj[same]
    d = mpp[lc[ii]] * np.hypot(lxy[ii, 0] - rxy[jj, 0], lxy[ii, 1] - rxy[jj, 1])
    ok = d <= radius_um
    ii, jj, d = ii[ok], jj[ok], d[ok]
    order = np.lexsort((jj, ii, d))
    used_l: set[int] = set()
    used_r: set[int] = set()
    pairs = []
    for dist, i, j in zip(d[order].tolist(), ii[order].tolist(), jj[order].tolist()):
        if i in used_l or j in used_r:
            continue
        used_l.add(i)
        used_r.add(j)
        pairs.append((dist, i, j))
    return pairs


def match_points(
    left: Sequence,
    right: Sequence,
    images: Mapping[str, ImageMeta],
    radius_um: float,
) -> Matching:
    """Greedy global matching: shortest admissible pairs first.

    Points are anything with ``image_id``, ``x_px`` and ``y_px``.
    """
    if not radius_um > 0:
        raise ConfigError(f"radius_um must be positive, got {radius_um}")
    pairs = _greedy_pairs(*_coords(left), *_coords(right), images, radius_um)
    used_l = {i for _, i, _ in pairs}
    used_r = {j for _, _, j in pairs}
    return Matching(
        tuple(MatchPair(i, j, d) for d, i, j in pairs),
        tuple(i for i in range(len(left)) if i not in used_l),
        tuple(j for j in range(len(right)) if j not in used_r),
    )


@dataclass(frozen=True)
class PRF:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def __add__(self, other: "PRF") -> "PRF":
        return PRF(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def rater_prf(
    rater_annotations: Sequence,
    consensus_set: ConsensusSet,
    images: Mapping[str, ImageMeta],
    radius_um: float | None = None,
) -> PRF:
    """Counts pooled over images; the radius defaults to the consensus radius."""
    radius = consensus_set.config.radius_um if radius_um is None else radius_um
    m = match_points(rater_annotations, consensus_set.entries, images, radius)
    return PRF(m.tp, len(m.unmatched_left), len(m.unmatched_right))


def study_raters(annotations: Iterable[PointAnnotation]) -> list[str]:
    return sorted({a.rater_id for a in annotations})


def loo_agreement(
    annotations: Sequence[PointAnnotation],
    images: Mapping[str, ImageMeta],
    config: ConsensusConfig = ConsensusConfig(),
    *,
    raters: Iterable[str] | None = None,
    match_radius_um: float | None = None,
) -> dict[str, PRF]:
    """Each rater against the consensus of all the others."""
    return {
        row.rater_id: row.prf
        for row in threshold_sweep(
            annotations,
            images,
            config,
            t_min=config.min_raters,
            t_max=config.min_raters,
            raters=raters,
            match_radius_um=match_radius_um,
        )
    }


@dataclass(frozen=True)
class SweepRow:
    threshold: int
    rater_id: str
    prf: PRF
    consensus_size: int


def threshold_sweep(
    annotations: Sequence[PointAnnotation],
    images: Mapping[str, ImageMeta],
    config: ConsensusConfig = ConsensusConfig(),
    t_min: int = 2,
    t_max: int = 7,
    *,
    raters: Iterable[str] | None = None,
    match_radius_um: float | None = None,
) -> list[SweepRow]:
    """Per-rater PRF against leave-one-out consensus for each threshold.

    The clustering does not depend on the threshold, so each rater's
    leave-one-out clustering is computed once and re-thresholded. The result
    equals calling :func:`leave_one_out_consensus` per rater and threshold.
    """
    raters = sorted(set(raters) if raters is not None else study_raters(annotations))
    if t_min < 1 or t_max < t_min:
        raise ConfigError(f"invalid threshold range {t_min}..{t_max}")
    if t_max > len(raters) - 1:
        raise ConfigError(f"t_max={t_max} exceeds the {len(raters) - 1} raters left out-of-sample")
    kept = filter_labels(annotations, config.label_filter)
    radius = config.radius_um if match_radius_um is None else match_radius_um
    rows = []
    per_rater = {r: [] for r in raters}
    for a in kept:
        if a.rater_id not in per_rater:
            raise UnknownRaterError(f"annotation {a.annotation_id!r} from rater outside the study")
        per_rater[a.rater_id].append(a)
    if not radius > 0:
        raise ConfigError(f"radius_um must be positive, got {radius}")
    index = ClusterIndex(kept, images, config.radius_um)
    for rater in raters:
        # same matching as rater_prf against leave_one_out_consensus, without building the sets
        support = index.support_counts(exclude_rater=rater, min_raters=t_min)
        l_img, lxy = _coords(per_rater[rater])
        for t in range(t_min, t_max + 1):
            kept_t = [s for s in support if s[3] >= t]
            rxy = np.array([(s[1], s[2]) for s in kept_t], dtype=float).reshape(-1, 2)
            tp = len(_greedy_pairs(l_img, lxy, [s[0] for s in kept_t], rxy, images, radius))
            rows.append(SweepRow(t, rater, PRF(tp, len(l_img) - tp, len(kept_t) - tp), len(kept_t)))
    rows.sort(key=lambda r: (r.threshold, r.rater_id))
    return rows


def agreement_csv(rows: Iterable[SweepRow], phase_tag: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase_tag", "rater_id", "threshold", "tp", "fp", "fn", "precision", "recall", "f1"])
    for r in rows:
        p = r.prf
        w.writerow([phase_tag, r.rater_id, r.threshold, p.tp, p.fp, p.fn, repr(p.precision), repr(p.recall), repr(p.f1)])
    return buf.getvalue()


# -- mitotic count reliability -------------------------------------------


@dataclass(frozen=True)
class CountMatrix:
    image_ids: tuple[str, ...]
    rater_ids: tuple[str, ...]
    counts: np.ndarray  # shape (n_images, k_raters)

    def __post_init__(self):
        if self.counts.shape != (len(self.image_ids), len(self.rater_ids)):
            raise ConfigError("count matrix shape does not match its labels")


def mitotic_count_matrix(
    annotations: Iterable[PointAnnotation],
    image_ids: Iterable[str],
    rater_ids: Iterable[str],
) -> CountMatrix:
    """Per-image, per-rater annotation counts (filter labels beforehand)."""
    image_ids = tuple(sorted(image_ids))
    rater_ids = tuple(sorted(rater_ids))
    row = {k: i for i, k in enumerate(image_ids)}
    col = {k: j for j, k in enumerate(rater_ids)}
    counts = np.zeros((len(image_ids), len(rater_ids)), dtype=np.int64)
    for a in annotations:
        counts[row[a.image_id], col[a.rater_id]] += 1
    return CountMatrix(image_ids, rater_ids, counts)


@dataclass(frozen=True)
class ICCResult:
    icc: float
    ms_r: float
    ms_c: float
    ms_e: float
    n: int
    k: int

    def to_dict(self) -> dict:
        return {
            "n_images": self.n,
            "k_raters": self.k,
            "icc_2_1": self.icc,
            "ms_r": self.ms_r,
            "ms_c": self.ms_c,
            "ms_e": self.ms_e,
        }


def icc_2_1(matrix: CountMatrix | np.ndarray) -> ICCResult:
    """Two-way random effects, absolute agreement, single rater ICC."""
    x = np.asarray(matrix.counts if isinstance(matrix, CountMatrix) else matrix, dtype=float)
    if x.ndim != 2:
        raise ConfigError("ICC needs a 2-D images x raters matrix")
    n, k = x.shape
    if n < 2 or k < 2:
        raise ConfigError(f"ICC needs at least 2 images and 2 raters, got {n}x{k}")
    grand = x.mean()
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    ss_r = k * np.sum((row_means - grand) ** 2)
    ss_c = n * np.sum((col_means - grand) ** 2)
    resid = x - row_means[:, None] - col_means[None, :] + grand
    ss_e = np.sum(resid**2)
    ms_r = ss_r / (n - 1)
    ms_c = ss_c / (k - 1)
    ms_e = ss_e / ((n - 1) * (k - 1))
    denom = ms_r + (k - 1) * ms_e + (k / n) * (ms_c - ms_e)
    if denom == 0:
        raise DegenerateError("ICC undefined: no variance in the count matrix")
    return ICCResult(float((ms_r - ms_e) / denom), float(ms_r), float(ms_c), float(ms_e), n, k)


def icc(matrix: CountMatrix | np.ndarray) -> float:
    return icc_2_1(matrix).icc
