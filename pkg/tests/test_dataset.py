"""Synthetic spectral dataset: generation, splits, persistence."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scai.dataset import (
    ClassRecipe,
    DatasetError,
    DatasetParseError,
    DegenerateCurveError,
    Peak,
    build_dataset,
    default_recipes,
    labels_of,
    load_dataset,
    load_recipes,
    normalize,
    peak_positions,
    save_dataset,
    save_recipes,
    split_dataset,
    synth_curve,
)


@pytest.fixture(scope="module")
def small_set():
    return build_dataset(default_recipes(), per_class=10, seed=0)


# -- recipes -----------------------------------------------------------------


def test_default_recipes_shape():
    recipes = default_recipes()
    assert len(recipes) == 12
    assert [r.label for r in recipes] == list(range(12))
    assert len({r.name for r in recipes}) == 12
    for r in recipes:
        r.validate(400)
        assert r.peaks, "every class needs at least one sharp peak"


def test_recipe_validation():
    bad = ClassRecipe(
        label=0,
        name="off-grid",
        peaks=[Peak(center=450.0, width=3.0, amplitude=1.0)],
        background=Peak(center=200.0, width=80.0, amplitude=0.3),
    )
    with pytest.raises(DatasetError):
        bad.validate(400)


def test_peak_positions_sorted_unique():
    positions = peak_positions(default_recipes())
    assert positions == sorted(set(positions))
    assert all(0 <= p < 400 for p in positions)
    # Shared calibration peaks present in every class's recipe.
    assert 200 in positions and 120 in positions and 264 in positions


# -- curve synthesis -----------------------------------------------------------


def test_normalize_range_and_flat_rejection():
    out = normalize(np.array([1.0, 3.0, 2.0]))
    assert out.min() == 0.0 and out.max() == 1.0
    with pytest.raises(DegenerateCurveError):
        normalize(np.full(16, 0.25))


def test_synth_curve_deterministic_per_rng_seed():
    recipe = default_recipes()[3]
    a = synth_curve(recipe, np.random.default_rng(42))
    b = synth_curve(recipe, np.random.default_rng(42))
    c = synth_curve(recipe, np.random.default_rng(43))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_curves_normalized(small_set):
    for c in small_set:
        assert c.values.shape == (400,)
        assert c.values.min() == 0.0
        assert c.values.max() == 1.0


def test_build_dataset_ids_and_balance(small_set):
    ids = [c.sample_id for c in small_set]
    assert len(ids) == len(set(ids)) == 120
    labels, counts = np.unique(labels_of(small_set), return_counts=True)
    assert labels.tolist() == list(range(12))
    assert (counts == 10).all()
    assert small_set[0].sample_id == "c00-s0000"


def test_build_dataset_reproducible(small_set):
    again = build_dataset(default_recipes(), per_class=10, seed=0)
    for a, b in zip(small_set, again):
        assert a.sample_id == b.sample_id
        assert np.array_equal(a.values, b.values)
    other = build_dataset(default_recipes(), per_class=10, seed=1)
    diffs = sum(
        not np.array_equal(a.values, b.values) for a, b in zip(small_set, other)
    )
    assert diffs == len(small_set)


def test_build_dataset_rejects_bad_count():
    with pytest.raises(DatasetError):
        build_dataset(default_recipes(), per_class=0)


@given(st.integers(min_value=0, max_value=11), st.integers(min_value=0, max_value=2**31 - 1))
def test_synth_curve_always_normalized(label, seed):
    recipe = default_recipes()[label]
    curve = synth_curve(recipe, np.random.default_rng(seed))
    assert curve.values.min() == 0.0 and curve.values.max() == 1.0
    assert np.isfinite(curve.values).all()


# -- splits --------------------------------------------------------------------


def test_split_stratified(small_set):
    train, valid, test = split_dataset(small_set, seed=0)
    assert (len(train), len(valid), len(test)) == (96, 12, 12)
    for part, per_class in ((train, 8), (valid, 1), (test, 1)):
        labels, counts = np.unique(labels_of(part), return_counts=True)
        assert labels.tolist() == list(range(12))
        assert (counts == per_class).all()
    # Partition: no sample lost or duplicated.
    all_ids = sorted(c.sample_id for part in (train, valid, test) for c in part)
    assert all_ids == sorted(c.sample_id for c in small_set)


def test_split_deterministic_and_seed_sensitive(small_set):
    a = split_dataset(small_set, seed=5)
    b = split_dataset(small_set, seed=5)
    c = split_dataset(small_set, seed=6)
    assert [x.sample_id for x in a[0]] == [x.sample_id for x in b[0]]
    assert [x.sample_id for x in a[0]] != [x.sample_id for x in c[0]]


def test_split_rejects_indivisible(small_set):
    with pytest.raises(DatasetError, match="divisible"):
        split_dataset(small_set[:115], ratios=(8, 1, 1))
    with pytest.raises(DatasetError):
        split_dataset(small_set, ratios=(8, 0, 2))


# -- persistence -----------------------------------------------------------------


def test_dataset_csv_round_trip(tmp_path, small_set):
    path = tmp_path / "data.csv"
    save_dataset(small_set, str(path))
    again = load_dataset(str(path))
    assert len(again) == len(small_set)
    for a, b in zip(small_set, again):
        assert a.sample_id == b.sample_id and a.label == b.label
        assert np.array_equal(a.values, b.values)  # repr round-trip is exact


def test_dataset_csv_bytes_stable(tmp_path, small_set):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    save_dataset(small_set, str(p1))
    save_dataset(small_set, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_load_dataset_reports_line_numbers(tmp_path):
    path = tmp_path / "broken.csv"
    path.write_text("sample_id,label,v_0,v_1\nok-1,3,0.5,0.25\nbad-2,seven,0.5,0.25\n")
    with pytest.raises(DatasetParseError) as err:
        load_dataset(str(path))
    assert err.value.line == 3


def test_load_dataset_rejects_ragged_row(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("sample_id,label,v_0,v_1\nok-1,3,0.5\n")
    with pytest.raises(DatasetParseError):
        load_dataset(str(path))


def test_load_dataset_rejects_bad_header(tmp_path):
    path = tmp_path / "noheader.csv"
    path.write_text("id,label,v_0\nok-1,3,0.5\n")
    with pytest.raises(DatasetParseError):
        load_dataset(str(path))


def test_recipes_json_round_trip(tmp_path):
    recipes = default_recipes()
    path = tmp_path / "recipes.json"
    save_recipes(recipes, str(path))
    again = load_recipes(str(path))
    assert len(again) == len(recipes)
    for a, b in zip(recipes, again):
        assert a.label == b.label and a.name == b.name
        assert a.shift_range == b.shift_range
        assert a.noise_level == b.noise_level
        assert len(a.peaks) == len(b.peaks)
        for pa, pb in zip(a.peaks, b.peaks):
            assert (pa.center, pa.width, pa.amplitude) == (pb.center, pb.width, pb.amplitude)
            assert (pa.center_jitter, pa.amplitude_jitter) == (pb.center_jitter, pb.amplitude_jitter)
    # Serialization is stable byte-for-byte.
    other = tmp_path / "again.json"
    save_recipes(again, str(other))
    assert path.read_bytes() == other.read_bytes()


def test_curves_from_saved_recipes_match(tmp_path, small_set):
    path = tmp_path / "recipes.json"
    save_recipes(default_recipes(), str(path))
    rebuilt = build_dataset(load_recipes(str(path)), per_class=10, seed=0)
    for a, b in zip(small_set, rebuilt):
        assert np.array_equal(a.values, b.values)
