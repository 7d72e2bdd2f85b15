import csv
import io
import math
import random

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from builders import ann
from oracles import anova_icc, best_matching_size
from mfconsensus.agreement import (
    PRF,
    agreement_csv,
    icc,
    icc_2_1,
    loo_agreement,
    match_points,
    mitotic_count_matrix,
    rater_prf,
    threshold_sweep,
)
from mfconsensus.consensus import ConsensusConfig, ConsensusEntry, ConsensusSet, leave_one_out_consensus
from mfconsensus.core import ImageMeta, Point
from mfconsensus.errors import ConfigError, DegenerateError
from mfconsensus.sim import PRESETS, simulate_study, study_images

UM = 4.0


def pt(x_um, y_um, image="img"):
    return Point(image, x_um * UM, y_um * UM)


def test_identical_sets_match_perfectly(images):
    pts = [pt(10, 10), pt(50, 50), pt(90, 10)]
    m = match_points(pts, pts, images, 7.5)
    assert m.tp == 3 and all(p.distance_um == 0 for p in m.pairs)
    assert m.unmatched_left == () and m.unmatched_right == ()


def test_empty_right_side(images):
    m = match_points([pt(1, 1)], [], images, 7.5)
    assert m.tp == 0 and m.unmatched_left == (0,)


def test_two_by_two_cross(images):
    l1, r1 = pt(100, 100), pt(103, 100)
    l2, r2 = _solve((103, 100), 5.0)
    m = match_points([l1, l2], [r1, r2], images, 7.5)
    assert [(p.left, p.right) for p in m.pairs] == [(0, 0), (1, 1)]
    assert m.tp == best_matching_size([l1, l2], [r1, r2], {"img": 0.25}, 7.5)


def _solve(r1, d_r1):
    """Place L2 and R2 so that |L1R2| = 6, |L2R1| = 5, |L2R2| = 7 (um), L1 at (100, 100)."""
    # R2 straight above L1 at 6 um; L2 on the circle of radius 5 around R1 with |L2R2| = 7
    r2 = np.array([100.0, 106.0])
    c = np.array(r1, dtype=float)
    d = np.linalg.norm(r2 - c)
    a = (d_r1**2 - 7.0**2 + d**2) / (2 * d)
    h = math.sqrt(d_r1**2 - a**2)
    mid = c + a * (r2 - c) / d
    perp = np.array([-(r2 - c)[1], (r2 - c)[0]]) / d
    l2 = mid - h * perp
    return pt(*l2), pt(*r2)


def test_cross_fixture_distances(images):
    l2, r2 = _solve((103, 100), 5.0)
    l1, r1 = pt(100, 100), pt(103, 100)
    dist = lambda a, b: 0.25 * math.hypot(a.x_px - b.x_px, a.y_px - b.y_px)
    assert [round(dist(*p), 9) for p in [(l1, r1), (l1, r2), (l2, r1), (l2, r2)]] == [3, 6, 5, 7]


def test_greedy_can_lose_one_pair(images):
    # L1 sits between R1 and R2; greedy takes the shortest pair and strands L2
    left = [pt(100, 100), pt(93, 100)]
    right = [pt(99, 100), pt(106, 100)]
    m = match_points(left, right, images, 7.5)
    assert m.tp == 1
    assert best_matching_size(left, right, {"img": 0.25}, 7.5) == 2


def test_match_radius_must_be_positive(images):
    with pytest.raises(ConfigError):
        match_points([], [], images, 0)


points_strategy = st.lists(st.tuples(st.floats(0, 60), st.floats(0, 60)), max_size=8)


@settings(max_examples=150, deadline=None)
@given(points_strategy, points_strategy)
def test_matching_is_one_to_one_and_maximal(lraw, rraw):
    im = {"img": ImageMeta("img", 1000, 1000, 0.25)}
    left = [pt(x, y) for x, y in lraw]
    right = [pt(x, y) for x, y in rraw]
    m = match_points(left, right, im, 7.5)
    ls = [p.left for p in m.pairs]
    rs = [p.right for p in m.pairs]
    assert len(set(ls)) == len(ls) and len(set(rs)) == len(rs)
    assert sorted(ls + list(m.unmatched_left)) == list(range(len(left)))
    assert sorted(rs + list(m.unmatched_right)) == list(range(len(right)))
    assert [p.distance_um for p in m.pairs] == sorted(p.distance_um for p in m.pairs)
    assert all(p.distance_um <= 7.5 for p in m.pairs)
    # maximal: no admissible pair left with both ends free
    for i in m.unmatched_left:
        for j in m.unmatched_right:
            a, b = left[i], right[j]
            assert 0.25 * math.hypot(a.x_px - b.x_px, a.y_px - b.y_px) > 7.5
    assert m.tp <= best_matching_size(left, right, {"img": 0.25}, 7.5)


@settings(max_examples=150, deadline=None)
@given(points_strategy, points_strategy)
def test_greedy_exact_when_candidates_unique(lraw, rraw):
    im = {"img": ImageMeta("img", 1000, 1000, 0.25)}
    left = [pt(x, y) for x, y in lraw]
    right = [pt(x, y) for x, y in rraw]
    near = [[j for j, b in enumerate(right) if 0.25 * math.hypot(a.x_px - b.x_px, a.y_px - b.y_px) <= 7.5]
            for a in left]
    assume(all(len(n) <= 1 for n in near))
    assume(all(sum(j in n for n in near) <= 1 for j in range(len(right))))
    assert match_points(left, right, im, 7.5).tp == best_matching_size(left, right, {"img": 0.25}, 7.5)


def test_prf_conventions():
    p = PRF(8, 2, 2)
    assert (p.precision, p.recall, p.f1) == (0.8, 0.8, pytest.approx(0.8))
    silent = PRF(0, 0, 5)
    assert (silent.precision, silent.recall, silent.f1) == (1.0, 0.0, 0.0)
    assert PRF(0, 3, 0).recall == 1.0
    assert PRF(0, 0, 0).f1 == 1.0
    assert PRF(1, 2, 3) + PRF(1, 1, 1) == PRF(2, 3, 4)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_formula(tp, fp, fn):
    p = PRF(tp, fp, fn)
    expected = 2 * p.precision * p.recall / (p.precision + p.recall) if p.precision + p.recall else 0.0
    assert p.f1 == expected
    assert 0 <= p.f1 <= min(1.0, 2 * min(p.precision, p.recall))


def test_rater_prf_counts(images):
    truth = [pt(20 * i, 20) for i in range(1, 11)]
    entries = tuple(ConsensusEntry("img", p.x_px, p.y_px, 6) for p in truth)
    cs = ConsensusSet(ConsensusConfig(), entries, frozenset({"B"}), frozenset({"img"}))
    rater = [ann(f"a{i}", "A", p.x_px + 4, p.y_px) for i, p in enumerate(truth[:8])]
    rater += [ann("x1", "A", 40, 400), ann("x2", "A", 400, 400)]
    prf = rater_prf(rater, cs, images)
    assert (prf.tp, prf.fp, prf.fn) == (8, 2, 2)
    assert prf.tp + prf.fn == len(cs) and prf.tp + prf.fp == len(rater)
    silent = rater_prf([], cs, images)
    assert (silent.precision, silent.recall, silent.f1) == (1.0, 0.0, 0.0)


# -- ICC -------------------------------------------------------------------


def test_icc_perfect_agreement():
    assert icc(np.array([[10, 10, 10], [20, 20, 20], [30, 30, 30]])) == 1.0


def test_icc_constant_matrix_is_degenerate():
    with pytest.raises(DegenerateError):
        icc(np.full((4, 3), 5))


def test_icc_needs_two_by_two():
    with pytest.raises(ConfigError):
        icc(np.array([[1, 2, 3]]))


def test_icc_matches_anova_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = rng.integers(0, 40, size=(4, 3))
        if np.all(m == m.flat[0]):
            continue
        assert abs(icc(m) - anova_icc(m.tolist())) < 1e-9


def test_icc_reference_value():
    # Shrout & Fleiss style 6 targets x 4 judges data set, ICC(2,1) = 0.29 to two places
    data = np.array([[9, 2, 5, 8], [6, 1, 3, 2], [8, 4, 6, 8], [7, 1, 2, 6], [10, 5, 6, 9], [6, 2, 4, 7]])
    assert round(icc(data), 2) == 0.29
    res = icc_2_1(data)
    assert (res.n, res.k) == (6, 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-20, 20))
def test_icc_invariances(seed, shift):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 30, size=(int(rng.integers(2, 8)), int(rng.integers(2, 6))))
    assume(np.var(m.mean(axis=1)) > 0)
    base = icc(m)
    assert math.isclose(icc(m + shift), base, abs_tol=1e-9)
    assert math.isclose(icc(m[rng.permutation(m.shape[0])]), base, abs_tol=1e-9)
    assert base <= 1.0 + 1e-12


def test_count_matrix():
    ims = ["i1", "i2", "i3"]
    anns = [ann("1", "A", 0, 0, "i1"), ann("2", "A", 0, 0, "i1"), ann("3", "B", 0, 0, "i1"),
            ann("4", "B", 0, 0, "i3"), ann("5", "A", 0, 0, "i2")]
    m = mitotic_count_matrix(anns, ims, ["B", "A"])
    assert m.rater_ids == ("A", "B")
    assert m.counts.tolist() == [[2, 1], [1, 0], [0, 1]]
    assert m.counts.sum(axis=0).tolist() == [3, 2]
    assert mitotic_count_matrix([], ims, ["A", "B"]).counts.tolist() == [[0, 0]] * 3


# -- leave-one-out agreement and sweeps ------------------------------------


def test_two_perfect_raters(images):
    pts = [(100, 100), (500, 300), (900, 900)]
    anns = [ann(f"{r}{i}", r, x, y) for r in "AB" for i, (x, y) in enumerate(pts)]
    prf = loo_agreement(anns, images, ConsensusConfig(min_raters=1))
    assert {r: p.f1 for r, p in prf.items()} == {"A": 1.0, "B": 1.0}


def test_sweep_t1_with_one_other_rater(images):
    anns = [ann("a", "A", 100, 100), ann("b1", "B", 300, 300), ann("b2", "B", 700, 100)]
    rows = threshold_sweep(anns, images, t_min=1, t_max=1)
    by_rater = {r.rater_id: r for r in rows}
    assert by_rater["A"].consensus_size == 2
    assert by_rater["B"].consensus_size == 1


def test_sweep_range_checks(images):
    anns = [ann("a", "A", 100, 100), ann("b", "B", 100, 100), ann("c", "C", 100, 100)]
    with pytest.raises(ConfigError):
        threshold_sweep(anns, images, t_min=0, t_max=2)
    with pytest.raises(ConfigError):
        threshold_sweep(anns, images, t_min=3, t_max=2)
    with pytest.raises(ConfigError):
        threshold_sweep(anns, images, t_min=1, t_max=3)
    assert len(threshold_sweep(anns, images, t_min=1, t_max=2)) == 6


@pytest.fixture(scope="module")
def p2_study():
    return simulate_study(PRESETS["P2"].with_seed(5), study_images(6))


def test_sweep_matches_direct_loo(p2_study):
    idx = {im.image_id: im for im in p2_study.images}
    rows = threshold_sweep(p2_study.annotations, idx, t_min=2, t_max=7)
    assert len(rows) == 13 * 6
    assert [(r.threshold, r.rater_id) for r in rows] == sorted((r.threshold, r.rater_id) for r in rows)
    rng = random.Random(1)
    for row in rng.sample(rows, 8):
        cs = leave_one_out_consensus(p2_study.annotations, row.rater_id, ConsensusConfig(min_raters=row.threshold), idx)
        mine = [a for a in p2_study.annotations if a.rater_id == row.rater_id]
        assert rater_prf(mine, cs, idx) == row.prf
        assert len(cs) == row.consensus_size


def test_sweep_sizes_non_increasing(p2_study):
    idx = {im.image_id: im for im in p2_study.images}
    rows = threshold_sweep(p2_study.annotations, idx)
    for rater in {r.rater_id for r in rows}:
        sizes = [r.consensus_size for r in rows if r.rater_id == rater]
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_p2_mean_f1_in_plausible_band(p2_study):
    idx = {im.image_id: im for im in p2_study.images}
    prf = loo_agreement(p2_study.annotations, idx)
    mean_f1 = sum(p.f1 for p in prf.values()) / len(prf)
    assert 0.6 <= mean_f1 <= 0.9


def test_agreement_csv_layout():
    from mfconsensus.agreement import SweepRow

    text = agreement_csv([SweepRow(6, "R01", PRF(8, 2, 2), 10)], "P2")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["phase_tag", "rater_id", "threshold", "tp", "fp", "fn", "precision", "recall", "f1"]
    assert rows[1][:6] == ["P2", "R01", "6", "8", "2", "2"]
    assert float(rows[1][8]) == PRF(8, 2, 2).f1
