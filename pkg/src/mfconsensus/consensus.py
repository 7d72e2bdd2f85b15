"""Multi-rater consensus by sequential nearest-centroid clustering.

Annotations are processed in the order given (canonical order after
parsing). Each one joins the nearest existing cluster on its image whose
centroid is within ``radius_um``, ties going to the lowest cluster id, or
else seeds a new cluster. A cluster becomes a consensus MF when enough
*distinct* raters contributed to it.

Implementation note: the sequential rule never lets an annotation interact
with anything farther than ``2 * radius_um`` away. When a point ``m`` joins a
cluster with centroid ``c``, the centroid moves onto the segment ``[c, m]``,
so the latest member is always within ``radius_um`` of the current
centroid. Any cluster an annotation could join therefore has a member
within ``2 * radius_um`` of it. Running the rule separately on the connected
components of the ``2 * radius_um`` neighbour graph gives exactly the same
clusters (and the same floating-point centroids) as one global pass, and is
much cheaper on realistic rater studies.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from operator import itemgetter
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import ImageMeta, LabelFilter, PointAnnotation, dumps, filter_labels, image_records
from .errors import ConfigError, ImageReferenceError, UnknownRaterError

DEFAULT_RADIUS_UM = 7.5
DEFAULT_MIN_RATERS = 6
MAX_TABLE_WIDTH = 64


@dataclass(frozen=True)
class ConsensusConfig:
    radius_um: float = DEFAULT_RADIUS_UM
    min_raters: int = DEFAULT_MIN_RATERS
    label_filter: LabelFilter = field(default_factory=LabelFilter)

    def __post_init__(self):
        if not self.radius_um > 0:
            raise ConfigError(f"radius_um must be positive, got {self.radius_um}")
        if self.min_raters < 1:
            raise ConfigError(f"min_raters must be >= 1, got {self.min_raters}")

    def with_min_raters(self, t: int) -> "ConsensusConfig":
        return ConsensusConfig(self.radius_um, t, self.label_filter)

    def to_dict(self) -> dict:
        return {"radius_um": self.radius_um, "min_raters": self.min_raters, "labels": self.label_filter.to_list()}


@dataclass(frozen=True)
class Cluster:
    cluster_id: int
    image_id: str
    x_px: float
    y_px: float
    members: tuple[PointAnnotation, ...]
    # distance to the centroid at the moment each member joined (0 for the seed)
    join_distances_um: tuple[float, ...]

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_px, self.y_px)

    @property
    def distinct_raters(self) -> frozenset[str]:
        return frozenset(m.rater_id for m in self.members)


@dataclass(frozen=True)
class ConsensusEntry:
    image_id: str
    x_px: float
    y_px: float
    n_raters: int


@dataclass(frozen=True)
class ConsensusSet:
    config: ConsensusConfig
    entries: tuple[ConsensusEntry, ...]
    source_raters: frozenset[str]
    image_ids: frozenset[str] = frozenset()

    def __len__(self):
        return len(self.entries)

    def count_by_image(self) -> dict[str, int]:
        counts = dict.fromkeys(sorted(self.image_ids), 0)
        for e in self.entries:
            counts[e.image_id] = counts.get(e.image_id, 0) + 1
        return counts


def _components(xy_um: np.ndarray, link_um: float, close_um: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Connected components of the ``link_um`` neighbour graph.

    Returns ``(order, starts, compact)``: row positions grouped by component
    (ascending inside each group), the start of each group in ``order``, and
    whether every pair inside the group is closer than ``close_um``.
    """
    n = len(xy_um)
    tree = cKDTree(xy_um)
    pairs = tree.query_pairs(link_um, output_type="ndarray") if n > 1 else np.empty((0, 2), np.intp)
    if len(pairs) == 0:
        return np.arange(n), np.arange(n), np.zeros(n, dtype=bool)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    n_comp, labels = connected_components(graph, directed=False)
    order = np.argsort(labels, kind="stable")
    sizes = np.bincount(labels, minlength=n_comp)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    d = np.hypot(*(xy_um[pairs[:, 0]] - xy_um[pairs[:, 1]]).T)
    n_close = np.bincount(labels[pairs[d < close_um, 0]], minlength=n_comp)
    compact = (sizes > 1) & (n_close == sizes * (sizes - 1) // 2)
    return order, starts, compact


def _run_sequential(points: Sequence[PointAnnotation], mpp: float, radius_um: float) -> list[tuple]:
    """The clustering rule itself, applied to one group of points in order.

    Returns ``(member positions, join distances, cx, cy)`` per cluster in
    creation order.
    """
    sx: list[float] = []
    sy: list[float] = []
    cx: list[float] = []
    cy: list[float] = []
    members: list[list[int]] = []
    joins: list[list[float]] = []
    for i, a in enumerate(points):
        best = -1
        best_d = math.inf
        for j in range(len(cx)):
            d = mpp * math.hypot(a.x_px - cx[j], a.y_px - cy[j])
            if d <= radius_um and d < best_d:
                best, best_d = j, d
        if best < 0:
            sx.append(a.x_px)
            sy.append(a.y_px)
            cx.append(a.x_px)
            cy.append(a.y_px)
            members.append([i])
            joins.append([0.0])
        else:
            sx[best] += a.x_px
            sy[best] += a.y_px
            members[best].append(i)
            joins[best].append(best_d)
            n = len(members[best])
            cx[best] = sx[best] / n
            cy[best] = sy[best] / n
    return [(members[j], joins[j], cx[j], cy[j]) for j in range(len(cx))]


class ClusterIndex:
    """Clustering of one annotation list, reusable for leave-one-rater-out.

    Components of the ``2 * radius`` neighbour graph are computed once. With
    a rater removed, each full component minus that rater's annotations is a
    union of components of the reduced graph, so only components that
    contained the rater need to be re-clustered.
    """

    def __init__(
        self,
        annotations: Sequence[PointAnnotation],
        images: Mapping[str, ImageMeta],
        radius_um: float = DEFAULT_RADIUS_UM,
    ):
        if not radius_um > 0:
            raise ConfigError(f"radius_um must be positive, got {radius_um}")
        self.annotations = list(annotations)
        self.radius_um = radius_um
        anns = self.annotations
        self._mpp = {}
        codes = {}
        for a in anns:
            if a.image_id not in codes:
                if a.image_id not in images:
                    raise ImageReferenceError(f"unknown image_id {a.image_id!r}")
                codes[a.image_id] = len(codes)
                self._mpp[a.image_id] = images[a.image_id].mpp
        # each component: (image_id, ascending input indices, raters present)
        self._components: list[tuple[str, list[int], frozenset[str]]] = []
        self._compact: list[bool] = []
        self._full_clusters = None
        self._base: dict[int, list] = {}
        self._rater_comps = None
        self._table = None
        if not anns:
            return
        # all images in one plane of micrometers, shifted far enough apart never to link
        image_ids = list(codes)
        mpp = np.array([self._mpp[i] for i in image_ids])
        code = np.array([codes[a.image_id] for a in anns])
        self._pxy = np.array([(a.x_px, a.y_px) for a in anns], dtype=float)
        xy = self._pxy * mpp[code][:, None]
        xy[:, 0] += code * (xy[:, 0].max() + 10 * radius_um)
        # small safety margins: coarser components and a stricter compactness test are always exact
        order, starts, compact = _components(xy, 2.0 * radius_um * (1 + 1e-6), radius_um * (1 - 1e-9))
        self._order, self._starts = order, starts
        order = order.tolist()
        bounds = starts.tolist() + [len(order)]
        for c, is_compact in enumerate(compact.tolist()):
            members = order[bounds[c]:bounds[c + 1]]
            image_id = anns[members[0]].image_id
            if len(members) == 1:
                raters = frozenset((anns[members[0]].rater_id,))
            else:
                raters = frozenset([anns[k].rater_id for k in members])
            self._components.append((image_id, members, raters))
            # very large compact groups go through the sequential path instead of the padded table
            self._compact.append(is_compact and len(members) <= MAX_TABLE_WIDTH)

    @property
    def _full(self) -> list[list[tuple]]:
        if self._full_clusters is None:
            anns = self.annotations
            self._full_clusters = [
                [(c[1][0], c[0], c[1], [0.0], anns[c[1][0]].x_px, anns[c[1][0]].y_px, 1)]
                if len(c[1]) == 1
                else self._cluster_component(c, None)
                for c in self._components
            ]
        return self._full_clusters

    def _cluster_component(self, comp, exclude_rater):
        image_id, members, _ = comp
        anns = self.annotations
        if exclude_rater is not None:
            members = [k for k in members if anns[k].rater_id != exclude_rater]
        if not members:
            return []
        if len(members) == 1:
            k = members[0]
            return [(k, image_id, members, [0.0], anns[k].x_px, anns[k].y_px, 1)]
        out = []
        sub = [anns[k] for k in members]
        for mem, joins, cx, cy in _run_sequential(sub, self._mpp[image_id], self.radius_um):
            ks = [members[m] for m in mem]
            n_raters = len({anns[k].rater_id for k in ks}) if len(ks) > 1 else 1
            out.append((ks[0], image_id, ks, joins, cx, cy, n_raters))
        return out

    def _raw(self, exclude_rater: str | None) -> list[tuple]:
        raw = []
        for comp, full in zip(self._components, self._full):
            if exclude_rater is None or exclude_rater not in comp[2]:
                raw.extend(full)
            else:
                raw.extend(self._cluster_component(comp, exclude_rater))
        raw.sort(key=lambda r: r[0])
        return raw

    def _compact_table(self):
        """Padded per-row layout of the compact components for vectorized sums.

        Returns ``(component ids, x, y, rater codes, input indices, valid)``
        with one row per compact component, members left to right.
        """
        if self._table is None:
            comp_ids = np.flatnonzero(self._compact)
            sizes = np.array([len(self._components[ci][1]) for ci in comp_ids], dtype=np.intp)
            width = int(sizes.max()) if len(sizes) else 1
            col = np.arange(width)
            valid = col[None, :] < sizes[:, None]
            pos = self._starts[comp_ids][:, None] + np.minimum(col[None, :], sizes[:, None] - 1)
            idx = self._order[pos] if len(comp_ids) else np.zeros((0, width), dtype=np.intp)
            rater_codes = {r: c for c, r in enumerate(sorted({a.rater_id for a in self.annotations}))}
            rcode = np.array([rater_codes[a.rater_id] for a in self.annotations])
            x = np.where(valid, self._pxy[idx, 0], 0.0)
            y = np.where(valid, self._pxy[idx, 1], 0.0)
            self._table = (comp_ids, x, y, np.where(valid, rcode[idx], -1), idx, valid, rater_codes)
        return self._table

    def _compact_supports(self, comp_ids: np.ndarray, exclude_rater: str | None) -> list[tuple[int, int, tuple]]:
        """(first index, component id, support) of compact components,
        optionally without one rater.

        A compact component is a single cluster for any subset of its points.
        Excluded points are replaced by 0.0, which leaves a left-to-right sum
        bit-identical to the running sum of the sequential loop; ``cumsum``
        adds strictly in order.
        """
        if len(comp_ids) == 0:
            return []
        all_ids, x, y, rc, idx, valid, rater_codes = self._compact_table()
        rows = np.searchsorted(all_ids, comp_ids)
        keep = valid[rows]
        if exclude_rater is not None:
            keep = keep & (rc[rows] != rater_codes.get(exclude_rater, -2))
        n = keep.sum(axis=1)
        cx = np.cumsum(np.where(keep, x[rows], 0.0), axis=1)[:, -1] / n
        cy = np.cumsum(np.where(keep, y[rows], 0.0), axis=1)[:, -1] / n
        first = idx[rows, np.argmax(keep, axis=1)]
        comps = self._components
        drop = exclude_rater is not None
        return [
            (k, ci, (comps[ci][0], sx, sy, len(comps[ci][2]) - drop))
            for k, ci, sx, sy in zip(first.tolist(), comp_ids.tolist(), cx.tolist(), cy.tolist())
        ]

    def clusters(self, exclude_rater: str | None = None) -> list[Cluster]:
        """Clusters in creation order, ids numbered from 0."""
        anns = self.annotations
        return [
            Cluster(cid, image_id, cx, cy, tuple(anns[k] for k in ks), tuple(joins))
            for cid, (_, image_id, ks, joins, cx, cy, _) in enumerate(self._raw(exclude_rater))
        ]

    def consensus_entries(self, min_raters: int, exclude_rater: str | None = None) -> tuple[ConsensusEntry, ...]:
        return tuple(
            ConsensusEntry(image_id, cx, cy, n)
            for (_, image_id, _, _, cx, cy, n) in self._raw(exclude_rater)
            if n >= min_raters
        )

    def support_counts(
        self, exclude_rater: str | None = None, min_raters: int = 1
    ) -> list[tuple[str, float, float, int]]:
        """(image_id, cx, cy, distinct raters) for every cluster backed by at
        least ``min_raters`` raters, in cluster-id order."""
        if self._rater_comps is None:
            self._rater_comps = defaultdict(list)
            for ci, comp in enumerate(self._components):
                for rater in comp[2]:
                    self._rater_comps[rater].append(ci)
        base = self._base.get(min_raters)
        if base is None:
            base = []
            anns = self.annotations
            for ci, comp in enumerate(self._components):
                image_id, members, raters = comp
                if len(raters) < min_raters:
                    continue
                if len(members) == 1:
                    k = members[0]
                    base.append((k, ci, (image_id, anns[k].x_px, anns[k].y_px, 1)))
                elif not self._compact[ci]:
                    full = self._full_clusters[ci] if self._full_clusters is not None else self._cluster_component(comp, None)
                    base.extend((r[0], ci, (r[1], r[4], r[5], r[6])) for r in full if r[6] >= min_raters)
            compact = [ci for ci, comp in enumerate(self._components) if self._compact[ci] and len(comp[2]) >= min_raters]
            base.extend(self._compact_supports(np.array(compact, dtype=np.intp), None))
            base.sort(key=itemgetter(0))
            self._base[min_raters] = base
        affected = self._rater_comps.get(exclude_rater, ()) if exclude_rater is not None else ()
        if not affected:
            return [sup for _, _, sup in base]
        skip = set(affected)
        keyed = [(k, sup) for k, ci, sup in base if ci not in skip]
        compact = []
        for ci in affected:
            comp = self._components[ci]
            if len(comp[2]) - 1 < max(min_raters, 1):
                continue  # no cluster here can reach the threshold
            if self._compact[ci]:
                compact.append(ci)
            else:
                keyed.extend(
                    (r[0], (r[1], r[4], r[5], r[6]))
                    for r in self._cluster_component(comp, exclude_rater)
                    if r[6] >= min_raters
                )
        keyed.extend((k, sup) for k, _, sup in self._compact_supports(np.array(compact, dtype=np.intp), exclude_rater))
        keyed.sort(key=itemgetter(0))
        return [sup for _, sup in keyed]


def cluster_annotations(
    annotations: Sequence[PointAnnotation],
    images: Mapping[str, ImageMeta],
    radius_um: float = DEFAULT_RADIUS_UM,
) -> list[Cluster]:
    """Cluster annotations per image; cluster ids follow creation order."""
    return ClusterIndex(annotations, images, radius_um).clusters()


def consensus(
    clusters: Iterable[Cluster],
    config: ConsensusConfig | int,
    *,
    source_raters: Iterable[str] | None = None,
    image_ids: Iterable[str] | None = None,
) -> ConsensusSet:
    """Keep clusters supported by at least ``config.min_raters`` distinct raters."""
    if isinstance(config, int):
        if config < 1:
            raise ConfigError(f"min_raters must be >= 1, got {config}")
        config = ConsensusConfig(min_raters=config)
    clusters = list(clusters)
    entries = []
    for c in clusters:
        n = len(c.distinct_raters)
        if n >= config.min_raters:
            entries.append(ConsensusEntry(c.image_id, c.x_px, c.y_px, n))
    if source_raters is None:
        source_raters = {r for c in clusters for r in c.distinct_raters}
    if image_ids is None:
        image_ids = {c.image_id for c in clusters}
    return ConsensusSet(config, tuple(entries), frozenset(source_raters), frozenset(image_ids))


def build_consensus(
    annotations: Sequence[PointAnnotation],
    images: Mapping[str, ImageMeta],
    config: ConsensusConfig = ConsensusConfig(),
    *,
    raters: Iterable[str] | None = None,
) -> ConsensusSet:
    """Label filter, cluster and threshold in one step."""
    kept = filter_labels(annotations, config.label_filter)
    clusters = cluster_annotations(kept, images, config.radius_um)
    raters = set(raters) if raters is not None else {a.rater_id for a in annotations}
    if raters and config.min_raters > len(raters):
        raise ConfigError(f"min_raters={config.min_raters} exceeds the {len(raters)} raters in the study")
    return consensus(clusters, config, source_raters=raters, image_ids=images.keys())


def leave_one_out_consensus(
    annotations: Sequence[PointAnnotation],
    excluded_rater: str,
    config: ConsensusConfig,
    images: Mapping[str, ImageMeta],
    *,
    raters: Iterable[str] | None = None,
) -> ConsensusSet:
    """Consensus of every rater except ``excluded_rater``.

    ``raters`` is the study's rater set; it defaults to the raters present in
    ``annotations``, so a rater with no annotations must be passed explicitly.
    """
    raters = set(raters) if raters is not None else {a.rater_id for a in annotations}
    if excluded_rater not in raters:
        raise UnknownRaterError(f"rater {excluded_rater!r} not in study")
    rest = [a for a in annotations if a.rater_id != excluded_rater]
    return build_consensus(rest, images, config, raters=raters - {excluded_rater})


def dump_consensus(cs: ConsensusSet, images: Iterable[ImageMeta]) -> bytes:
    doc = {
        "config": cs.config.to_dict(),
        "source_raters": sorted(cs.source_raters),
        "images": image_records(images),
        "entries": [
            {"image_id": e.image_id, "x_px": float(e.x_px), "y_px": float(e.y_px), "n_raters": e.n_raters}
            for e in cs.entries
        ],
    }
    return dumps(doc)


def parse_consensus(data: bytes | str) -> tuple[list[ImageMeta], ConsensusSet]:
    from .core import _load_json, _record, parse_images
    from .errors import SchemaError

    doc = _load_json(data)
    if not isinstance(doc, dict) or not {"config", "entries", "images"} <= set(doc):
        raise SchemaError("consensus document needs 'config', 'images' and 'entries'")
    cfg = doc["config"]
    if not isinstance(cfg, dict):
        raise SchemaError("config must be an object")
    try:
        config = ConsensusConfig(
            float(cfg["radius_um"]), int(cfg["min_raters"]), LabelFilter.parse(",".join(cfg["labels"]))
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"bad consensus config: {exc}") from exc
    images = parse_images(doc["images"])
    known = {im.image_id for im in images}
    spec = {"image_id": str, "x_px": float, "y_px": float, "n_raters": int}
    entries = []
    for i, rec in enumerate(doc["entries"]):
        r = _record(rec, spec, f"entries[{i}]")
        if r["image_id"] not in known:
            raise ImageReferenceError(f"entries[{i}]: unknown image_id {r['image_id']!r}")
        entries.append(ConsensusEntry(r["image_id"], r["x_px"], r["y_px"], r["n_raters"]))
    cs = ConsensusSet(config, tuple(entries), frozenset(doc.get("source_raters", ())), frozenset(known))
    return images, cs
