import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnalab.attacks import (
    AdditiveTrigger,
    BlobConfig,
    PatchTrigger,
    PoisonPlan,
    a2a_target,
    chessboard,
    cosine_basis,
    embed,
    load_dataset_csv,
    make_blobs,
    poison,
    random_patch,
    save_dataset_csv,
    trigger_from_dict,
)


@pytest.fixture(scope="module")
def small_blobs():
    return make_blobs(BlobConfig(class_count=3, d=6, train_per_class=40, test_per_class=10), seed=3)


def test_empty_and_full_patches(rng):
    x = rng.uniform(size=(4, 5))
    pattern = rng.uniform(size=5)
    np.testing.assert_array_equal(embed(PatchTrigger(np.zeros(5), pattern), x), x)
    np.testing.assert_array_equal(embed(PatchTrigger(np.ones(5), pattern), x), np.tile(pattern, (4, 1)))


def test_additive_trigger_clamps():
    x = np.array([0.5, 0.2])
    np.testing.assert_allclose(embed(AdditiveTrigger([0.9, -0.5]), x), [1.0, 0.0])


def test_patch_validation():
    with pytest.raises(ValueError):
        PatchTrigger(np.array([0.5, 1.0]), np.zeros(2))
    with pytest.raises(ValueError):
        embed(chessboard(3), np.zeros((2, 4)))


def test_trigger_dict_round_trip(rng):
    for trig in (chessboard(6, 0.01), random_patch(6, rng, 2)):
        back = trigger_from_dict(trig.to_dict())
        x = rng.uniform(size=(3, 6))
        np.testing.assert_array_equal(embed(back, x), embed(trig, x))


def test_chessboard_alternates():
    np.testing.assert_allclose(chessboard(4, 0.1).delta, [0.1, -0.1, 0.1, -0.1])


@pytest.mark.parametrize("c,C,t", [(9, 10, 0), (0, 10, 1), (0, 1, 0)])
def test_a2a_map(c, C, t):
    assert a2a_target(c, C) == t


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 11))
def test_a2a_is_a_permutation(C, c):
    c = c % C
    assert 0 <= a2a_target(c, C) < C
    assert sorted(a2a_target(k, C) for k in range(C)) == list(range(C))


def test_cosine_basis_is_orthonormal():
    b = cosine_basis(20, 8)
    np.testing.assert_allclose(b.T @ b, np.eye(8), atol=1e-12)


@pytest.mark.parametrize("geometry", ["orthogonal", "smooth", "uniform"])
def test_blobs_are_bounded_and_split(geometry):
    data = make_blobs(BlobConfig(class_count=4, d=10, train_per_class=50, test_per_class=20,
                                 geometry=geometry, correlation=0.5), seed=0)
    assert data.x.min() >= 0 and data.x.max() <= 1
    # the defense split is carved out of the test instances
    assert len(data.rows("train")) == 200
    assert len(data.rows("defense")) == 8
    assert len(data.rows("test")) == 72


def test_blobs_are_deterministic():
    cfg = BlobConfig(class_count=3, d=5, train_per_class=30, test_per_class=5)
    a, b = make_blobs(cfg, 7), make_blobs(cfg, 7)
    np.testing.assert_array_equal(a.x, b.x)
    assert not np.array_equal(a.x, make_blobs(cfg, 8).x)


def test_zero_count_leaves_data_unchanged(small_blobs):
    out, rows = poison(small_blobs, chessboard(6, 0.05), PoisonPlan("a2o", 2, 0), seed=0)
    assert rows.size == 0
    np.testing.assert_array_equal(out.x, small_blobs.x)
    np.testing.assert_array_equal(out.y, small_blobs.y)


def test_a2o_audit(small_blobs):
    out, rows = poison(small_blobs, chessboard(6, 0.05), PoisonPlan("a2o", 2, 5), seed=0)
    assert len(rows) == 10
    assert np.all(out.y[rows] == 2)
    assert not np.any(small_blobs.y[rows] == 2)
    assert np.all(small_blobs.split[rows] == "train")
    untouched = np.setdiff1d(np.arange(len(out.y)), rows)
    np.testing.assert_array_equal(out.x[untouched], small_blobs.x[untouched])


def test_a2a_audit(small_blobs):
    out, rows = poison(small_blobs, chessboard(6, 0.05), PoisonPlan("a2a", None, 5), seed=0)
    assert len(rows) == 15
    np.testing.assert_array_equal(out.y[rows], (small_blobs.y[rows] + 1) % 3)


def test_poison_errors(small_blobs):
    with pytest.raises(ValueError):
        poison(small_blobs, chessboard(6), PoisonPlan("a2o", 5, 1), seed=0)
    with pytest.raises(ValueError):
        poison(small_blobs, chessboard(6), PoisonPlan("a2o", 0, 10_000), seed=0)
    with pytest.raises(ValueError):
        PoisonPlan("a2o", None, 1)


def test_csv_round_trip(tmp_path, small_blobs):
    path = tmp_path / "d.csv"
    save_dataset_csv(small_blobs, path, {"seed": 3}, comment="config_hash=abc seed=3")
    assert path.read_text().startswith("# config_hash=abc seed=3\nf0,")
    back = load_dataset_csv(path)
    np.testing.assert_array_equal(back.x, small_blobs.x)
    np.testing.assert_array_equal(back.y, small_blobs.y)
    assert list(back.split) == list(small_blobs.split)
    assert back.class_count == 3
