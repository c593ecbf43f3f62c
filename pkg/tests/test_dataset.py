import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kode.dataset import (
    CSV_HEADER, MANIFEST, Dataset, DatasetConfig, DatasetError, NormalizationSpec, anchors,
    build_dataset, build_eval_dataset, recenter, uncenter, window,
)
from kode.plant import ExcitationConfig, Pattern, Trajectory

NORM = NormalizationSpec.from_excitation(ExcitationConfig())
SHORT = ExcitationConfig(duration=3.0)


@pytest.fixture(scope="module")
def small():
    return build_dataset(DatasetConfig(n_train_windows=600, windows_per_traj=150, seed=3), excitation=SHORT)


def ramp_trajectory(n_states, pattern=Pattern.FRO):
    states = np.zeros((n_states, 6))
    states[:, 0] = np.arange(n_states) * 0.1 + 100.0
    states[:, 1] = -50.0
    states[:, 2] = np.linspace(0, 7.0, n_states)  # unwrapped heading past 2 pi
    return Trajectory(0.01, pattern, states, np.zeros((n_states - 1, 12)))


def test_recenter_examples():
    hist = np.array([[90.0, -60.0, 0.1, 1, 2, 3], [100.0, -50.0, 0.2, 4, 5, 6]])
    targ = np.array([[103.0, -46.0, 0.3, 7, 8, 9]])
    h, t, anchor = recenter(hist, targ)
    np.testing.assert_array_equal(h[-1, :2], [0.0, 0.0])
    np.testing.assert_array_equal(t[0, :2], [3.0, 4.0])
    np.testing.assert_array_equal(h[:, 2:], hist[:, 2:])
    np.testing.assert_array_equal(uncenter(h, anchor), hist)
    np.testing.assert_array_equal(uncenter(t, anchor), targ)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.integers(0, 5))
def test_recenter_round_trip_and_anchor_is_origin(x, y, h_p):
    rng = np.random.default_rng(0)
    hist = rng.normal(size=(h_p + 1, 6))
    hist[:, :2] += (x, y)
    h, t, anchor = recenter(hist, hist[::-1])
    np.testing.assert_array_equal(h[-1, :2], 0.0)
    # (x - a) + a can round in the last bit for arbitrary floats
    np.testing.assert_allclose(uncenter(h, anchor), hist, rtol=0, atol=1e-11)


def test_normalization_examples():
    u = np.zeros(12)
    np.testing.assert_array_equal(NORM.normalize(u)[:6], 0.5)
    np.testing.assert_array_equal(NORM.normalize(NORM.low), 0.0)
    np.testing.assert_array_equal(NORM.normalize(NORM.high), 1.0)
    np.testing.assert_array_equal(NORM.normalize(NORM.high + 5), 1.0)


def test_degenerate_normalization_rejected():
    low = np.zeros(12)
    high = np.ones(12)
    high[3] = 0.0
    with pytest.raises(ValueError, match=r"\[3\]"):
        NormalizationSpec(low, high)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=12, max_size=12))
def test_normalization_inverse_is_identity(frac):
    u = NORM.low + np.array(frac) * (NORM.high - NORM.low)
    np.testing.assert_allclose(NORM.denormalize(NORM.normalize(u)), u, rtol=0, atol=1e-12)


def test_window_counts():
    assert len(window(ramp_trajectory(1001), 0, 100)) == 901
    assert len(window(ramp_trajectory(101), 0, 100)) == 1
    assert window(ramp_trajectory(50), 0, 100) == []
    assert anchors(1001, 5, 100, 1)[0] == 5


def test_windows_are_recentered_and_keep_heading():
    traj = ramp_trajectory(300)
    for w in window(traj, 3, 20, stride=7):
        np.testing.assert_array_equal(w.history[-1, :2], 0.0)
        assert w.history.shape == (4, 6) and w.targets.shape == (20, 6) and w.controls.shape == (20, 12)
    w = window(traj, 0, 20)[250]
    assert w.history[-1, 2] == traj.states[250, 2]


def test_batch_deduplicates_shared_states(small):
    ks, ts = small.train_windows()
    b = small.batch(ks[:16], ts[:16])
    assert len(b.lift_histories) == 16 + small.h_e  # consecutive anchors overlap
    np.testing.assert_array_equal(b.states[:, 0, :2], 0.0)
    np.testing.assert_array_equal(b.lift_histories[:, -1, :2], 0.0)
    # lift entry for step i holds state anchor+i, positions relative to itself
    k, t = ks[3], ts[3]
    np.testing.assert_array_equal(b.lift_histories[b.lift_index[3, 5], -1, 2:],
                                  small.trajectories[k].states[t + 5, 2:])
    assert np.all((b.controls >= 0) & (b.controls <= 1))


def test_batch_rejects_out_of_range_anchor(small):
    k = small.splits["train"][0]
    with pytest.raises(IndexError):
        small.batch([k], [len(small.trajectories[k].states)])


def test_split_is_disjoint_and_counts_match(small):
    train, val = set(small.splits["train"]), set(small.splits["val"])
    assert not train & val
    assert small.pattern_counts().sum() == 600
    for p in Pattern:
        assert any(small.trajectories[k].pattern == p for k in val)


def test_default_pattern_mix():
    counts = build_dataset(DatasetConfig(n_train_windows=2000, seed=1), excitation=SHORT).pattern_counts()
    np.testing.assert_array_equal(counts, [860, 52, 512, 64, 512])


def test_one_step_pairs(small):
    s, u, s_next = small.one_step_pairs()
    assert s.shape == (600, 6) and u.shape == (600, 12)
    np.testing.assert_array_equal(s[:, :2], 0.0)
    ks, ts = small.train_windows()
    tr = small.trajectories[ks[10]].states
    np.testing.assert_array_equal(s_next[10, :2], tr[ts[10] + 1, :2] - tr[ts[10], :2])


def test_generation_is_deterministic():
    cfg = DatasetConfig(n_train_windows=100, windows_per_traj=50, seed=9)
    a = build_dataset(cfg, excitation=SHORT)
    b = build_dataset(cfg, excitation=SHORT)
    for x, y in zip(a.trajectories, b.trajectories):
        assert np.array_equal(x.states, y.states) and np.array_equal(x.controls, y.controls)
    assert a.train_ranges == b.train_ranges


def test_eval_dataset_layout():
    ev = build_eval_dataset([1, 0, 2, 0, 1], seed=4, excitation=SHORT)
    assert ev.splits["train"] == [] and len(ev.splits["test"]) == 4
    ks, ts = ev.eval_windows("test")
    assert len(ks) == 4 * 3  # 301 states, stride 100 -> anchors 0, 100, 200
    np.testing.assert_array_equal(ts[:3], [0, 100, 200])


def test_save_load_round_trip(small, tmp_path):
    small.save(tmp_path)
    m = json.loads((tmp_path / MANIFEST).read_text())
    for key in ("dt", "plant", "patterns", "normalization", "splits", "seed"):
        assert key in m
    assert sum(m["patterns"].values()) == 600
    first = next(iter(m["trajectories"]))
    assert (tmp_path / f"{first}.csv").read_text().splitlines()[0] == ",".join(CSV_HEADER)
    back = Dataset.load(tmp_path)
    assert back.splits == small.splits and back.train_ranges == small.train_ranges
    assert back.plant == small.plant and back.excitation == small.excitation
    for x, y in zip(small.trajectories, back.trajectories):
        assert x.pattern == y.pattern
        assert np.array_equal(x.states, y.states) and np.array_equal(x.controls, y.controls)


def test_load_rejects_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="missing manifest"):
        Dataset.load(tmp_path)


def test_load_rejects_tampered_file(small, tmp_path):
    small.save(tmp_path)
    path = tmp_path / f"{small.names[0]}.csv"
    lines = path.read_text().splitlines()
    lines[5] = lines[5].replace("0", "1", 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=str(path.name)):
        Dataset.load(tmp_path)


def test_load_rejects_wrong_counts(small, tmp_path):
    small.save(tmp_path)
    m = json.loads((tmp_path / MANIFEST).read_text())
    m["patterns"]["FRO"] += 1
    (tmp_path / MANIFEST).write_text(json.dumps(m))
    with pytest.raises(DatasetError, match="pattern counts"):
        Dataset.load(tmp_path)


def test_subset_limits_training_windows(small):
    sub = small.subset(100, np.random.default_rng(0))
    assert sub.pattern_counts().sum() == 100
    assert sub.splits["val"] == small.splits["val"]
