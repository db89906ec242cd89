import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixsearch.dataset import (
    DatasetError,
    SplitSpec,
    apply_scaler,
    derive_ewma,
    expected_window_count,
    fit_scaler,
    load_dataset,
    load_processed_table,
    load_scaler,
    make_windows,
    save_scaler,
    save_table,
    split_by_profile,
)

from conftest import make_table


def ewma_oracle(x, span):
    """Direct recurrence evaluation, one step at a time."""
    alpha = 2.0 / (span + 1.0)
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    out[0] = x[0]
    for t in range(1, len(x)):
        out[t] = alpha * x[t] + (1.0 - alpha) * out[t - 1]
    return out


class TestLoadDataset:
    SCHEMA = {"profile_id": "id", "u_d": "input", "pm": "target"}

    def test_three_row_csv(self, csv_factory):
        path = csv_factory(["profile_id", "u_d", "pm"],
                           [[1, 0.5, 2.0], [1, 0.6, 2.1], [2, 0.7, 2.2]])
        table = load_dataset(path, self.SCHEMA)
        assert table.n_rows == 3
        assert table.input_columns == ["u_d"]
        assert table.target_columns == ["pm"]
        assert table.profiles() == [1, 2]

    def test_non_numeric_cell_names_row_and_column(self, csv_factory):
        path = csv_factory(["profile_id", "u_d", "pm"],
                           [[1, 0.5, 2.0], [1, "oops", 2.1], [2, 0.7, 2.2]])
        with pytest.raises(DatasetError, match=r"row 2.*'u_d'"):
            load_dataset(path, self.SCHEMA)

    def test_motor_log_has_profile_65(self, csv_factory):
        rows = [[p, 0.1 * i, 0.2 * i] for p in (60, 65, 81) for i in range(4)]
        path = csv_factory(["profile_id", "u_d", "pm"], rows)
        table = load_dataset(path, self.SCHEMA)
        assert 65 in table.profiles()

    def test_missing_column(self, csv_factory):
        path = csv_factory(["profile_id", "u_d"], [[1, 0.5]])
        with pytest.raises(DatasetError, match="missing column"):
            load_dataset(path, self.SCHEMA)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DatasetError, match="empty"):
            load_dataset(path, self.SCHEMA)

    def test_non_finite_cell_rejected(self, csv_factory):
        path = csv_factory(["profile_id", "u_d", "pm"], [[1, "nan", 2.0]])
        with pytest.raises(DatasetError, match="non-finite"):
            load_dataset(path, self.SCHEMA)

    def test_schema_needs_roles(self):
        with pytest.raises(DatasetError, match="id column"):
            load_dataset("whatever.csv", {"a": "input", "b": "target"})


class TestDeriveEwma:
    def test_constant_series_is_fixed_point(self):
        table = make_table([[5.0, 0], [5.0, 0], [5.0, 0]], [1, 1, 1])
        out = derive_ewma(table, [3])
        np.testing.assert_array_equal(out.values[:, 2], [5.0, 5.0, 5.0])

    def test_two_point_recurrence(self):
        # span 3 -> alpha 0.5; y = [1, 0.5*3 + 0.5*1] = [1, 2]
        table = make_table([[1.0, 0], [3.0, 0]], [1, 1])
        out = derive_ewma(table, [3])
        np.testing.assert_allclose(out.values[:, 2], [1.0, 2.0], atol=1e-12)

    def test_matches_recurrence_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=200)
        table = make_table(np.column_stack([x, np.zeros(200)]), np.zeros(200))
        for span in (3, 10, 200):
            out = derive_ewma(table, [span])
            np.testing.assert_allclose(out.values[:, 2], ewma_oracle(x, span),
                                       atol=1e-12)

    def test_default_span_set_adds_eight_columns(self):
        rng = np.random.default_rng(1)
        table = make_table(rng.normal(size=(10, 3)), np.zeros(10),
                           roles=["input", "input", "target"])
        out = derive_ewma(table, [200, 500, 1500, 4000])
        assert len(out.column_names) == 3 + 8
        assert out.roles[3:] == ["input"] * 8

    def test_rejects_bad_span(self):
        table = make_table([[1.0, 0]], [1])
        with pytest.raises(DatasetError, match="span"):
            derive_ewma(table, [0])

    def test_profile_boundaries_are_hard(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=6)
        b = rng.normal(size=5)
        table = make_table(np.column_stack([np.concatenate([a, b]), np.zeros(11)]),
                           [1] * 6 + [2] * 5)
        out = derive_ewma(table, [4])
        np.testing.assert_allclose(out.values[:6, 2], ewma_oracle(a, 4), atol=1e-12)
        np.testing.assert_allclose(out.values[6:, 2], ewma_oracle(b, 4), atol=1e-12)
        # permuting profile blocks leaves each profile's derived column unchanged
        swapped = make_table(np.column_stack([np.concatenate([b, a]), np.zeros(11)]),
                             [2] * 5 + [1] * 6)
        out2 = derive_ewma(swapped, [4])
        np.testing.assert_array_equal(out2.values[5:, 2], out.values[:6, 2])
        np.testing.assert_array_equal(out2.values[:5, 2], out.values[6:, 2])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40),
           st.integers(1, 50), st.floats(-100, 100))
    def test_shift_equivariance_and_bounds(self, xs, span, shift):
        x = np.asarray(xs)
        table = make_table(np.column_stack([x, np.zeros(len(x))]), np.zeros(len(x)))
        out = derive_ewma(table, [span]).values[:, 2]
        # bounded by the running extrema of the input
        running_min = np.minimum.accumulate(x)
        running_max = np.maximum.accumulate(x)
        assert np.all(out >= running_min - 1e-9 * (1 + np.abs(running_min)))
        assert np.all(out <= running_max + 1e-9 * (1 + np.abs(running_max)))
        shifted = make_table(np.column_stack([x + shift, np.zeros(len(x))]),
                             np.zeros(len(x)))
        out_shifted = derive_ewma(shifted, [span]).values[:, 2]
        np.testing.assert_allclose(out_shifted, out + shift,
                                   atol=1e-7, rtol=1e-9)


class TestScaler:
    def test_minmax_from_train_rows_only(self):
        table = make_table([[2.0, 0], [4.0, 0], [6.0, 0], [99.0, 0]],
                           [1, 1, 1, 9])
        scaler = fit_scaler(table, SplitSpec.of({9}, set()))
        assert scaler.mins[0] == 2.0 and scaler.maxs[0] == 6.0

    def test_unclamped_outside_unit_interval(self):
        table = make_table([[0.0, 0], [1.0, 0], [9.0, 0]], [1, 1, 9])
        scaler = fit_scaler(table, SplitSpec.of({9}, set()))
        out = apply_scaler(table, scaler)
        assert out.values[2, 0] == 9.0

    def test_degenerate_column_maps_to_zero(self):
        table = make_table([[7.0, 1.0], [7.0, 2.0]], [1, 1])
        scaler = fit_scaler(table, SplitSpec.of(set(), set()))
        assert scaler.degenerate[0] and not scaler.degenerate[1]
        out = apply_scaler(table, scaler)
        np.testing.assert_array_equal(out.values[:, 0], [0.0, 0.0])

    def test_formula_endpoints_and_midpoint(self):
        table = make_table([[2.0, 0], [4.0, 0], [6.0, 0]], [1, 1, 1])
        scaler = fit_scaler(table, SplitSpec.of(set(), set()))
        out = apply_scaler(table, scaler)
        np.testing.assert_allclose(out.values[:, 0], [0.0, 0.5, 1.0], atol=1e-15)

    def test_train_cells_in_unit_interval_after_scaling(self):
        rng = np.random.default_rng(3)
        table = make_table(rng.normal(size=(50, 3)) * 10,
                           [1] * 30 + [2] * 20,
                           roles=["input", "input", "target"])
        split = SplitSpec.of({2}, set())
        scaler = fit_scaler(table, split)
        out = apply_scaler(table, scaler)
        train = out.values[:30]
        assert train.min() >= 0.0 and train.max() <= 1.0

    def test_double_application_is_not_identity(self):
        table = make_table([[2.0, 0], [6.0, 0]], [1, 1])
        scaler = fit_scaler(table, SplitSpec.of(set(), set()))
        once = apply_scaler(table, scaler)
        twice = apply_scaler(once, scaler)
        assert not np.allclose(once.values[:, 0], twice.values[:, 0])

    def test_column_mismatch(self):
        table = make_table([[1.0, 0]], [1])
        scaler = fit_scaler(table, SplitSpec.of(set(), set()))
        other = make_table([[1.0, 0]], [1], names=["x", "y"])
        with pytest.raises(DatasetError, match="columns"):
            apply_scaler(other, scaler)

    def test_no_train_rows(self):
        table = make_table([[1.0, 0]], [1])
        with pytest.raises(DatasetError, match="training"):
            fit_scaler(table, SplitSpec.of({1}, set()))


class TestSplitByProfile:
    def test_test_profile_rows_tagged(self):
        table = make_table([[1.0, 0]] * 4, [65, 65, 3, 3])
        out = split_by_profile(table, SplitSpec.of({65}, set()))
        assert list(out.split) == ["test", "test", "train", "train"]

    def test_multiple_val_profiles(self):
        pids = [18, 39, 46, 56, 75, 1]
        table = make_table([[1.0, 0]] * 6, pids)
        out = split_by_profile(table, SplitSpec.of(set(), {18, 39, 46, 56, 75}))
        assert list(out.split) == ["val"] * 5 + ["train"]

    def test_empty_split_gives_all_train(self):
        table = make_table([[1.0, 0]] * 3, [1, 2, 3])
        out = split_by_profile(table, SplitSpec.of(set(), set()))
        assert set(out.split) == {"train"}

    def test_absent_profile_warns_not_fails(self, caplog):
        table = make_table([[1.0, 0]] * 2, [1, 2])
        with caplog.at_level("WARNING"):
            out = split_by_profile(table, SplitSpec.of({99}, set()))
        assert "99" in caplog.text
        assert set(out.split) == {"train"}

    def test_overlapping_sets_rejected(self):
        with pytest.raises(DatasetError, match="overlap"):
            SplitSpec.of({1}, {1})

    def test_split_covering_everything_rejected(self):
        table = make_table([[1.0, 0]] * 2, [1, 2])
        with pytest.raises(DatasetError, match="cover"):
            split_by_profile(table, SplitSpec.of({1, 2}, set()))


class TestMakeWindows:
    def _table(self, lengths, tags=None):
        rows = sum(lengths)
        rng = np.random.default_rng(4)
        values = rng.normal(size=(rows, 2))
        pids = np.concatenate([np.full(n, i + 1) for i, n in enumerate(lengths)])
        split = np.concatenate([
            np.full(n, (tags or ["train"] * len(lengths))[i], dtype="U5")
            for i, n in enumerate(lengths)])
        return make_table(values, pids, split=split)

    def test_exact_length_profile_gives_one_window(self):
        ws = make_windows(self._table([300]), 300, 1)
        assert len(ws) == 1

    def test_305_rows_give_six_windows(self):
        ws = make_windows(self._table([305]), 300, 1)
        assert len(ws) == expected_window_count(305, 300, 1) == 6

    def test_windows_never_cross_profiles(self):
        ws = make_windows(self._table([300, 300]), 300, 1)
        assert len(ws) == 2
        assert list(ws.profile) == [1, 2]
        assert list(ws.start) == [0, 0]

    def test_short_profile_skipped_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            ws = make_windows(self._table([10, 300]), 300, 1)
        assert len(ws) == 1
        assert "shorter" in caplog.text

    def test_split_tag_follows_profile(self):
        ws = make_windows(self._table([300, 300], tags=["train", "val"]), 150, 150)
        assert list(ws.split) == ["train", "train", "val", "val"]

    def test_input_target_blocks_split_by_role(self):
        table = self._table([50])
        ws = make_windows(table, 10, 5)
        assert ws.inputs.shape == (len(ws), 10, 1)
        assert ws.targets.shape == (len(ws), 10, 1)
        np.testing.assert_array_equal(ws.inputs[0, :, 0], table.values[:10, 0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 60), st.integers(1, 20), st.integers(1, 10))
    def test_count_matches_closed_form(self, rows, length, stride):
        table = self._table([rows])
        if rows < length:
            with pytest.raises(DatasetError):
                make_windows(table, length, stride)
        else:
            ws = make_windows(table, length, stride)
            assert len(ws) == (rows - length) // stride + 1

    def test_rejects_untagged_table(self):
        table = make_table([[1.0, 0]] * 10, [1] * 10)
        with pytest.raises(DatasetError, match="split-tagged"):
            make_windows(table, 5, 1)


class TestPersistence:
    def test_table_roundtrip_is_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        table = make_table(rng.normal(size=(20, 3)), [1] * 10 + [2] * 10,
                           roles=["input", "input", "target"],
                           split=["train"] * 10 + ["val"] * 10)
        path = tmp_path / "t.csv"
        save_table(table, path)
        roles = dict(zip(table.column_names, table.roles))
        back = load_processed_table(path, roles)
        np.testing.assert_array_equal(back.values, table.values)
        np.testing.assert_array_equal(back.profile_ids, table.profile_ids)
        np.testing.assert_array_equal(back.split, table.split)
        assert back.column_names == table.column_names

    def test_scaler_roundtrip_is_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        table = make_table(rng.normal(size=(9, 2)), [1] * 9)
        scaler = fit_scaler(table, SplitSpec.of(set(), set()))
        path = tmp_path / "scaler.txt"
        save_scaler(scaler, path)
        back = load_scaler(path)
        np.testing.assert_array_equal(back.mins, scaler.mins)
        np.testing.assert_array_equal(back.maxs, scaler.maxs)
        assert back.column_names == scaler.column_names

    def test_scaler_file_validation(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("not,a,scaler,file\n")
        with pytest.raises(DatasetError, match="sidecar"):
            load_scaler(path)
