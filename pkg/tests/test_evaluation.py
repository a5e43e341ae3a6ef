import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import constant_images, mean_intensity_model
from rankcount.evaluation import (
    MetricsReport,
    SweepTable,
    evaluate,
    infer_image,
    metrics_from_predictions,
    patch_bounds,
    patch_sweep,
    rank_diagnostics,
    ranking_agreement,
    split_patches,
)
from rankcount.probe import ProbeModel
from rankcount.synth import RenderedImage


def identity_probe(bias=0.0):
    return ProbeModel(mean_intensity_model(), [1.0], bias)


# ---------------------------------------------------------------------------
# tiling


def test_patch_bounds_floor_rule():
    assert patch_bounds(10, 3) == [(0, 3), (3, 6), (6, 10)]
    assert patch_bounds(7, 7) == [(i, i + 1) for i in range(7)]


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 40), w=st.integers(1, 40), k=st.integers(1, 6), seed=st.integers(0, 1000))
def test_patches_tile_the_image_exactly(h, w, k, seed):
    if k > min(h, w):
        with pytest.raises(ValueError):
            split_patches(np.zeros((h, w, 3)), k)
        return
    img = np.random.default_rng(seed).random((h, w, 3)).astype(np.float32)
    patches = split_patches(RenderedImage(img, "s"), k)
    assert len(patches) == k * k
    cover = np.zeros((h, w), dtype=int)
    rebuilt = np.full_like(img, -1.0)
    rows, cols = patch_bounds(h, k), patch_bounds(w, k)
    for idx, p in enumerate(patches):
        i, j = divmod(idx, k)
        (r0, r1), (c0, c1) = rows[i], cols[j]
        assert p.source_id == f"s[{i},{j}]"
        cover[r0:r1, c0:c1] += 1
        rebuilt[r0:r1, c0:c1] = p.pixels
    assert np.all(cover == 1)
    assert np.array_equal(rebuilt, img)
    sizes_h = {p.shape[0] for p in patches}
    assert max(sizes_h) - min(sizes_h) <= 1


def test_split_patches_rejects_bad_k():
    with pytest.raises(ValueError):
        split_patches(np.zeros((4, 4, 3)), 0)
    with pytest.raises(ValueError):
        split_patches(np.zeros((4, 9, 3)), 5)


# ---------------------------------------------------------------------------
# patch inference


def test_infer_image_sums_per_patch_counts():
    img = constant_images([20], size=(16, 16))[0]
    probe = identity_probe()
    assert infer_image(probe, img, 1) == pytest.approx(20.0, abs=1e-3)
    assert infer_image(probe, img, 2) == pytest.approx(80.0, abs=1e-3)
    assert infer_image(probe, img, 4) == pytest.approx(320.0, abs=1e-3)


def test_infer_image_clamps_each_patch():
    # left half bright (count 30), right half dark (count 0); bias -10
    img = np.zeros((16, 16, 3), dtype=np.float32)
    img[:, :8] = 40 / 255.0
    probe = identity_probe(bias=-10.0)
    # k=2: two patches at 40-10=30 each, two at max(0-10, 0)=0
    assert infer_image(probe, img, 2) == pytest.approx(60.0, abs=1e-3)
    # k=1: whole image mean 20 -> 10
    assert infer_image(probe, img, 1) == pytest.approx(10.0, abs=1e-3)


def test_patch_resizing_preserves_constant_counts():
    # patches of unequal size are each resized to the model input
    img = constant_images([12], size=(17, 23))[0]
    assert infer_image(identity_probe(), img, 3) == pytest.approx(9 * 12.0, abs=1e-3)


# ---------------------------------------------------------------------------
# metrics


def test_metrics_hand_example():
    r = metrics_from_predictions([10, 20, 30], [12, 18, 33])
    assert r.mae == pytest.approx(7 / 3, abs=1e-4)
    assert r.mse == pytest.approx(np.sqrt(17 / 3), abs=1e-4)
    assert r.mae == pytest.approx(2.3333, abs=1e-4) and r.mse == pytest.approx(2.3805, abs=1e-4)
    assert [row["error"] for row in r.per_image] == [-2.0, 2.0, -3.0]


@given(st.lists(st.tuples(st.floats(0, 1e4), st.integers(0, 1000)), min_size=1, max_size=50))
def test_mae_never_exceeds_rmse(rows):
    p, t = zip(*rows)
    r = metrics_from_predictions(p, t)
    assert r.mae <= r.mse * (1 + 1e-12) + 1e-12


def test_metrics_input_validation():
    with pytest.raises(ValueError):
        metrics_from_predictions([], [])
    with pytest.raises(ValueError):
        metrics_from_predictions([1, 2], [1])


def test_report_serialization(tmp_path):
    r = metrics_from_predictions([1.5, 2.0], [1, 3], ids=["a", "b"], patch_k=2,
                                 model_digests={"probe": "abc"}, config={"seed": 0})
    data = json.loads(r.to_json())
    assert data["mae"] == r.mae and data["patch_k"] == 2 and data["config"] == {"seed": 0}
    assert r.to_json() == MetricsReport(**data).to_json()
    path = r.write(tmp_path / "rep" / "m.json")
    assert path.read_text() == r.to_json() + "\n"
    text = (tmp_path / "rep" / "m.txt").read_text()
    assert "MAE=" in text and text.splitlines()[1].startswith("a ")


def test_evaluate_with_known_predictions():
    images = constant_images([10, 20, 30], size=(8, 8))
    labeled = list(zip(images, [12, 18, 33]))
    r = evaluate(identity_probe(), labeled, k=1, ids=["x", "y", "z"])
    assert r.mae == pytest.approx(2.3333, abs=1e-4) and r.mse == pytest.approx(2.3805, abs=1e-4)
    assert [row["id"] for row in r.per_image] == ["x", "y", "z"]
    with pytest.raises(ValueError):
        evaluate(identity_probe(), [])


def test_patch_sweep_table(tmp_path):
    images = constant_images([10, 20], size=(12, 12))
    table = patch_sweep(identity_probe(), list(zip(images, [40, 80])), ks=(1, 2, 3))
    assert [r.patch_k for r in table.reports] == [1, 2, 3]
    assert table.reports[1].mae == pytest.approx(0.0, abs=1e-3)
    rows = json.loads(table.to_json())
    assert rows[0]["patch_k"] == 1 and "mse" in rows[0]
    assert len(table.to_text().splitlines()) == 4
    table.write(tmp_path / "s.json")
    assert (tmp_path / "s.txt").exists()
    assert isinstance(SweepTable([]).to_text(), str)


# ---------------------------------------------------------------------------
# ranking diagnostics


def _ranks(a):
    # average ranks for ties, computed independently of scipy
    a = np.asarray(a, dtype=float)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0
        i = j + 1
    return ranks


def _pairwise(p, t):
    score, n = 0.0, 0
    for i, j in itertools.combinations(range(len(p)), 2):
        if t[i] == t[j]:
            continue
        n += 1
        if p[i] == p[j]:
            score += 0.5
        elif (p[i] > p[j]) == (t[i] > t[j]):
            score += 1.0
    return score / n


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=3, max_size=30))
def test_ranking_agreement_matches_independent_oracles(rows):
    p, t = map(np.array, zip(*rows))
    rho, acc = ranking_agreement(p, t)
    if np.ptp(p) > 0 and np.ptp(t) > 0:
        expected = np.corrcoef(_ranks(p), _ranks(t))[0, 1]
        assert rho == pytest.approx(expected, abs=1e-9)
    else:
        assert rho is None
    if np.ptp(t) > 0:
        assert acc == pytest.approx(_pairwise(p, t))
    else:
        assert acc is None


def test_ranking_agreement_perfect_and_reversed():
    assert ranking_agreement([1, 2, 3], [10, 20, 30]) == (pytest.approx(1.0), 1.0)
    assert ranking_agreement([3, 2, 1], [10, 20, 30]) == (pytest.approx(-1.0), 0.0)
    with pytest.raises(ValueError):
        ranking_agreement([1], [1])


def test_rank_diagnostics_exports_features(tmp_path):
    model = mean_intensity_model()
    labeled = list(zip(constant_images([5, 50, 20, 90], size=(8, 8)), [5, 50, 20, 90]))
    diag = rank_diagnostics(model, labeled, tmp_path / "f.csv", ids=list("abcd"))
    assert diag.spearman == pytest.approx(1.0) and diag.pairwise_accuracy == 1.0
    with open(diag.feature_export_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id", "truth", "c_proxy", "f1"]
    assert [r[0] for r in rows[1:]] == list("abcd")
    assert float(rows[2][2]) == pytest.approx(50.0, abs=1e-3)
    assert rank_diagnostics(model, labeled).feature_export_path is None
