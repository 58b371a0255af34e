"""Aggregation math and figure/summary rendering."""

import numpy as np
import pytest

from twbc.report import (
    SUMMARY_HEADER,
    MethodSummary,
    aggregate_series,
    build_report,
    read_curves,
    render_report,
    render_vmonitor_figure,
    render_weight_figure,
    resample_onto,
    summarize_curves,
    write_summary_csv,
)


def write_curves(path, rows):
    lines = ["step,seed,success_rate,loss"]
    lines += [f"{s},{seed},{sr},{lo}" for s, seed, sr, lo in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_monitor(path, rows):
    lines = ["step,max_abs_V,min_V,max_V"]
    lines += [f"{s},{m},{-m},{m}" for s, m in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_tables(seed_dir):
    seed_dir.mkdir(parents=True, exist_ok=True)
    (seed_dir / "rewards.csv").write_text(
        "trajectory_id,step,R\n0,0,-0.5\n0,1,0.25\n1,0,1.5\n1,1,0.5\n",
        encoding="utf-8",
    )
    (seed_dir / "weights.csv").write_text(
        "trajectory_id,step,raw_W,normalized_W\n"
        "0,0,1,0.8\n0,1,2,1.6\n1,0,0.5,0.4\n1,1,1.5,1.2\n",
        encoding="utf-8",
    )


class TestReadCurves:
    def test_groups_by_seed_and_sorts_steps(self, tmp_path):
        p = tmp_path / "curves.csv"
        write_curves(p, [(200, 0, 0.5, 1.0), (100, 0, 0.25, 2.0),
                         (100, 1, 1.0, 0.5)])
        out = read_curves(p)
        assert sorted(out) == [0, 1]
        np.testing.assert_array_equal(out[0]["steps"], [100, 200])
        np.testing.assert_array_equal(out[0]["success"], [0.25, 0.5])
        np.testing.assert_array_equal(out[1]["loss"], [0.5])

    def test_rejects_wrong_columns(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("step,seed,reward\n1,0,0.5\n", encoding="utf-8")
        with pytest.raises(ValueError, match="expected columns"):
            read_curves(p)


class TestAggregation:
    def test_matching_grids_mean_std_by_hand(self):
        grid = np.array([100.0, 200.0])
        vals = [np.array([0.0, 0.4]), np.array([0.2, 0.8]),
                np.array([0.1, 0.6])]
        g, mean, std, resampled = aggregate_series(
            [(grid, v) for v in vals])
        assert not resampled
        np.testing.assert_array_equal(g, grid)
        stacked = np.stack(vals)
        np.testing.assert_allclose(mean, stacked.mean(axis=0), atol=1e-15)
        # population std, not sample std
        np.testing.assert_allclose(std, stacked.std(axis=0, ddof=0),
                                   atol=1e-15)

    def test_mismatched_grids_resample_to_coarsest(self):
        a = (np.array([1000.0, 2000.0, 3000.0]), np.array([0.0, 0.4, 0.8]))
        b = (np.array([1500.0, 3000.0]), np.array([0.1, 0.5]))
        g, mean, std, resampled = aggregate_series([a, b])
        assert resampled
        np.testing.assert_array_equal(g, [1500.0, 3000.0])
        # a interpolated at 1500 -> 0.2; means by hand
        np.testing.assert_allclose(mean, [(0.2 + 0.1) / 2, (0.8 + 0.5) / 2],
                                   atol=1e-15)
        np.testing.assert_allclose(std, [0.05, 0.15], atol=1e-15)

    def test_resample_clamps_at_ends(self):
        vals = resample_onto(np.array([0.0, 5000.0]),
                             np.array([1000.0, 2000.0]),
                             np.array([1.0, 3.0]))
        np.testing.assert_array_equal(vals, [1.0, 3.0])

    def test_empty_series_rejected(self):
        with pytest.raises(ValueError, match="nothing to aggregate"):
            aggregate_series([])


class TestSummaries:
    def test_summarize_curves_fields(self, tmp_path):
        p = tmp_path / "curves.csv"
        write_curves(p, [(100, 0, 0.0, 2.0), (200, 0, 0.5, 1.0),
                         (100, 1, 0.5, 1.5), (200, 1, 1.0, 0.5)])
        s = summarize_curves(p, "bc")
        assert s.label == "bc" and not s.resampled
        np.testing.assert_allclose(s.mean_success, [0.25, 0.75])
        np.testing.assert_allclose(s.std_success, [0.25, 0.25])
        np.testing.assert_allclose(s.mean_loss, [1.75, 0.75])

    def test_single_seed_has_zero_std(self, tmp_path):
        p = tmp_path / "curves.csv"
        write_curves(p, [(100, 0, 0.5, 1.0)])
        s = summarize_curves(p, "bc")
        np.testing.assert_array_equal(s.std_success, [0.0])

    def test_summary_csv_text_and_label_order(self, tmp_path):
        sa = MethodSummary(label="tailo", steps=np.array([100]),
                           mean_success=np.array([0.5]),
                           std_success=np.array([0.0]),
                           mean_loss=np.array([1.5]),
                           std_loss=np.array([0.25]))
        sb = MethodSummary(label="bc", steps=np.array([100]),
                           mean_success=np.array([1.0]),
                           std_success=np.array([0.125]),
                           mean_loss=np.array([2.0]),
                           std_loss=np.array([0.0]))
        path = tmp_path / "summary.csv"
        write_summary_csv([sa, sb], path)
        assert path.read_text() == (
            SUMMARY_HEADER + "\n"
            "bc,100,1,0.125,2,0\n"
            "tailo,100,0.5,0,1.5,0.25\n"
        )


class TestFigureRendering:
    def test_report_svg_deterministic(self, tmp_path):
        s = MethodSummary(label="bc", steps=np.array([100, 200]),
                          mean_success=np.array([0.2, 0.8]),
                          std_success=np.array([0.1, 0.05]),
                          mean_loss=np.array([2.0, 1.0]),
                          std_loss=np.array([0.2, 0.1]))
        render_report([s], tmp_path / "a.svg")
        render_report([s], tmp_path / "b.svg")
        raw = (tmp_path / "a.svg").read_bytes()
        assert raw.startswith(b"<?xml")
        assert raw == (tmp_path / "b.svg").read_bytes()

    def test_weight_figure_renders(self, tmp_path):
        write_tables(tmp_path)
        out = tmp_path / "w.svg"
        render_weight_figure(tmp_path / "rewards.csv",
                             tmp_path / "weights.csv", out)
        assert out.read_bytes().startswith(b"<?xml")

    def test_vmonitor_figure_renders(self, tmp_path):
        write_monitor(tmp_path / "m0.csv", [(1000, 1.0), (2000, 10.0)])
        write_monitor(tmp_path / "m1.csv", [(1000, 2.0), (2000, 4.0)])
        out = tmp_path / "v.svg"
        render_vmonitor_figure(
            {"seed0": tmp_path / "m0.csv", "seed1": tmp_path / "m1.csv"}, out)
        assert out.read_bytes().startswith(b"<?xml")


class TestBuildReport:
    def make_run_dir(self, root):
        run = root / "run1"
        write_curves((run / "bc").mkdir(parents=True) or run / "bc" /
                     "curves.csv", [(100, 0, 0.5, 1.0), (100, 1, 1.0, 0.5)])
        md = run / "smodice_kl"
        md.mkdir()
        write_curves(md / "curves.csv", [(100, 0, 0.0, 2.0)])
        write_tables(md / "seed0")
        write_monitor(md / "seed0" / "vmonitor.csv", [(1000, 1.0), (2000, 5.0)])
        return run

    def test_full_run_directory(self, tmp_path):
        run = self.make_run_dir(tmp_path)
        out = tmp_path / "rep"
        written = build_report([run], out)
        assert (out / "summary.csv").exists()
        assert (out / "report.svg").exists()
        names = {p.name for p in written["figures"]}
        assert names == {"weights_smodice_kl.svg", "vmonitor_smodice_kl.svg"}
        text = (out / "summary.csv").read_text()
        assert text.splitlines()[0] == SUMMARY_HEADER
        assert "bc,100," in text and "smodice_kl,100," in text

    def test_monitor_only_directory(self, tmp_path):
        run = tmp_path / "chain"
        write_monitor(
            (run / "smodice_kl" / "seed0").mkdir(parents=True)
            or run / "smodice_kl" / "seed0" / "vmonitor.csv",
            [(1000, 1.0), (2000, 100.0)],
        )
        out = tmp_path / "rep"
        written = build_report([run], out)
        assert "report" not in written
        assert (out / "summary.csv").read_text() == SUMMARY_HEADER + "\n"
        assert [p.name for p in written["figures"]] == \
            ["vmonitor_smodice_kl.svg"]

    def test_multiple_dirs_get_prefixed_labels(self, tmp_path):
        a = self.make_run_dir(tmp_path)
        b = tmp_path / "run2"
        (b / "bc").mkdir(parents=True)
        write_curves(b / "bc" / "curves.csv", [(100, 0, 0.25, 1.0)])
        out = tmp_path / "rep"
        build_report([a, b], out)
        text = (out / "summary.csv").read_text()
        assert "run1/bc,100," in text and "run2/bc,100," in text

    def test_resampling_note_written(self, tmp_path):
        run = tmp_path / "run"
        (run / "bc").mkdir(parents=True)
        write_curves(run / "bc" / "curves.csv",
                     [(100, 0, 0.0, 1.0), (200, 0, 0.5, 1.0),
                      (150, 1, 0.25, 1.0)])
        out = tmp_path / "rep"
        written = build_report([run], out)
        assert "resampled" in written["notes"].read_text()

    def test_empty_or_missing_dirs_rejected(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(ValueError, match="no method directories"):
            build_report([empty], tmp_path / "o1")
        with pytest.raises(FileNotFoundError):
            build_report([tmp_path / "nope"], tmp_path / "o2")
