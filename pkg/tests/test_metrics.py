import csv
import json
import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperdense.metrics import (
    asd,
    avd,
    dsc,
    evaluate,
    extract_boundary,
    hausdorff,
    metric_sums,
    nearest_rank,
    write_reports_csv,
    write_reports_json,
)


def box(shape, lo, hi):
    m = np.zeros(shape, bool)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = True
    return m


def boundary_oracle(mask, spacing=(1, 1, 1)):
    pts = []
    for idx in zip(*np.nonzero(mask)):
        for axis, step in product(range(3), (-1, 1)):
            nb = list(idx)
            nb[axis] += step
            if not 0 <= nb[axis] < mask.shape[axis] or not mask[tuple(nb)]:
                pts.append(np.array(idx) * spacing)
                break
    return np.array(pts, dtype=float)


def pairwise(a, b):
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


masks = st.integers(0, 2 ** 31 - 1).map(
    lambda s: np.random.default_rng(s).random((7, 6, 5)) < np.random.default_rng(s + 1).uniform(0.1, 0.7))


# -- overlap and volume -------------------------------------------------------

def test_dsc_cases():
    a = box((10, 10, 10), (0, 0, 0), (4, 4, 4))
    b = box((10, 10, 10), (2, 0, 0), (6, 4, 4))
    assert dsc(a, a) == 1.0
    assert dsc(a, b) == pytest.approx(2 * 32 / 128)
    assert dsc(a, ~a) == 0.0
    assert dsc(np.zeros(5), np.zeros(5)) == 1.0
    with pytest.raises(ValueError):
        dsc(np.zeros(3), np.zeros(4))


def test_avd_cases():
    assert avd(np.ones(10), np.ones(12)) == pytest.approx(20.0)
    assert avd(np.ones(10), np.zeros(10)) == pytest.approx(100.0)
    with pytest.raises(ValueError):
        avd(np.zeros(4), np.ones(4))


# -- boundaries and distances -------------------------------------------------

@given(masks)
@settings(max_examples=60, deadline=None)
def test_boundary_matches_oracle(mask):
    if not mask.any():
        return
    got = extract_boundary(mask, (0.5, 1.0, 2.0))
    want = boundary_oracle(mask, np.array([0.5, 1.0, 2.0]))
    assert sorted(map(tuple, got)) == sorted(map(tuple, want))


def test_boundary_of_filled_box_is_shell():
    m = box((9, 9, 9), (1, 1, 1), (6, 6, 6))
    assert len(extract_boundary(m)) == 5 ** 3 - 3 ** 3
    with pytest.raises(ValueError):
        extract_boundary(np.zeros((3, 3, 3)))


def test_single_voxels():
    a = extract_boundary(box((9, 9, 9), (0, 0, 0), (1, 1, 1)))
    b = extract_boundary(box((9, 9, 9), (3, 4, 0), (4, 5, 1)))
    assert hausdorff(a, b) == pytest.approx(5.0)
    assert hausdorff(a, b, 95) == pytest.approx(5.0)
    assert asd(a, b) == pytest.approx(5.0)


def test_shifted_cube():
    a = extract_boundary(box((12, 12, 12), (1, 1, 1), (6, 6, 6)))
    b = extract_boundary(box((12, 12, 12), (3, 1, 1), (8, 6, 6)))
    assert hausdorff(a, b) == pytest.approx(2.0)


def test_anisotropic_spacing():
    a = box((3, 3, 4), (1, 1, 0), (2, 2, 1))
    b = box((3, 3, 4), (1, 1, 1), (2, 2, 2))
    sp = (0.96, 0.96, 3.0)
    assert hausdorff(extract_boundary(a, sp), extract_boundary(b, sp)) == pytest.approx(3.0)


def test_nearest_rank():
    v = np.arange(1.0, 21.0)
    assert nearest_rank(v, 95) == 19.0
    assert nearest_rank(v, 100) == 20.0
    assert nearest_rank(v, 0) == 1.0
    assert nearest_rank(np.array([7.0]), 95) == 7.0


@given(masks, masks)
@settings(max_examples=60, deadline=None)
def test_distances_match_brute_force(ma, mb):
    if not (ma.any() and mb.any()):
        return
    sp = np.array([1.0, 0.7, 2.5])
    a, b = extract_boundary(ma, sp), extract_boundary(mb, sp)
    d = pairwise(a, b)
    ab, ba = d.min(1), d.min(0)
    assert hausdorff(a, b) == pytest.approx(max(ab.max(), ba.max()), abs=1e-12)
    want95 = max(np.sort(ab)[math.ceil(0.95 * len(ab)) - 1], np.sort(ba)[math.ceil(0.95 * len(ba)) - 1])
    assert hausdorff(a, b, 95) == pytest.approx(want95, abs=1e-12)
    assert asd(a, b) == pytest.approx(ab.mean(), abs=1e-12)
    assert asd(a, b, symmetric=True) == pytest.approx((ab.mean() + ba.mean()) / 2, abs=1e-12)
    # symmetry, ordering, identity
    assert hausdorff(a, b) == hausdorff(b, a)
    assert hausdorff(a, b, 95) <= hausdorff(a, b)
    assert hausdorff(a, a) == 0.0 and asd(a, a) == 0.0


@given(masks, masks, st.floats(0.1, 10))
@settings(max_examples=30, deadline=None)
def test_distance_scale_covariance(ma, mb, s):
    if not (ma.any() and mb.any()):
        return
    a1, b1 = extract_boundary(ma), extract_boundary(mb)
    a2, b2 = extract_boundary(ma, (s, s, s)), extract_boundary(mb, (s, s, s))
    assert hausdorff(a2, b2) == pytest.approx(s * hausdorff(a1, b1), rel=1e-12, abs=1e-12)
    assert asd(a2, b2) == pytest.approx(s * asd(a1, b1), rel=1e-12, abs=1e-12)


# -- evaluation reports -------------------------------------------------------

def test_evaluate_identical():
    rng = np.random.default_rng(0)
    ref = rng.integers(0, 4, (10, 10, 10))
    rep = evaluate(ref, ref, [1, 2, 3], subject="s")
    for c in (1, 2, 3):
        assert rep.per_class[c] == {"dsc": 1.0, "mhd": 0.0, "mhd95": 0.0, "asd": 0.0, "avd": 0.0}
    assert rep.mean("dsc") == 1.0


def test_evaluate_undefined_values():
    ref = np.zeros((5, 5, 5), int)
    ref[1:3, 1:3, 1:3] = 1
    pred = np.zeros_like(ref)
    pred[0, 0, 0] = 2
    rep = evaluate(ref, pred, [1, 2, 3])
    assert rep.per_class[1]["dsc"] == 0.0 and rep.per_class[1]["avd"] == 100.0
    assert rep.per_class[1]["mhd"] is None
    assert rep.per_class[2]["dsc"] == 0.0 and rep.per_class[2]["avd"] is None
    assert all(v is None for v in rep.per_class[3].values())
    assert rep.mean("mhd") is None
    with pytest.raises(ValueError):
        evaluate(ref, pred[:4], [1])


def test_report_files(tmp_path):
    ref = np.zeros((6, 6, 6), int)
    ref[1:4, 1:4, 1:4] = 1
    pred = np.roll(ref, 1, axis=0)
    reps = [evaluate(ref, pred, [1, 2], (1, 1, 2), "s1"), evaluate(ref, ref, [1], subject="s2")]
    write_reports_csv(reps, tmp_path / "m.csv")
    write_reports_json(reps, tmp_path / "m.json")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [(r["subject"], r["class"]) for r in rows] == [("s1", "1"), ("s1", "2"), ("s2", "1")]
    assert rows[1]["dsc"] == ""
    assert float(rows[0]["dsc"]) == pytest.approx(2 * 18 / 54)
    data = json.load(open(tmp_path / "m.json"))
    assert data[0]["per_class"]["1"]["mhd"] == pytest.approx(1.0)
    assert data[0]["per_class"]["2"]["dsc"] is None
    sums = metric_sums(reps)
    assert sums["dsc"] == pytest.approx(2 * 18 / 54 + 1)
