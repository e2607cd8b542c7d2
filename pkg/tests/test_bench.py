import csv
import io

import numpy as np
import pytest

from envshift.bench import (MEAN_ROW, BenchmarkReport, BenchSettings, mean_ad, parse_pretrainer,
                            parse_report_csv, render_meta, render_report, report_from_meta, roc_auc,
                            run_benchmark)
from envshift.detectors import DetectorKind
from envshift.eamoco import ContrastiveConfig
from envshift.errors import ConfigError, MissingDetector, OneClassOnly
from envshift.nn import TrainConfig
from envshift.pretrain import PretrainerKind
from envshift.synthgen import ScenarioConfig
from oracles import pair_count_auc

ERM_COLUMN = [63.1, 67.7, 63.8, 67.5, 40.4, 61.0, 75.7, 65.1]
EAMOCO_COLUMN = [70.9, 77.0, 71.1, 71.4, 67.7, 60.9, 77.0, 77.8]

TINY_SETTINGS = BenchSettings(train=TrainConfig(epochs=2),
                              contrastive=ContrastiveConfig(epochs=2, ae_epochs=2))
TINY_SCENARIO = ScenarioConfig(n_train_envs=3, n_test_envs=2, samples_per_env=40, seed=5)


# --- ROC-AUC -----------------------------------------------------------------

def test_roc_auc_examples():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert roc_auc([0.8, 0.7, 0.3, 0.1], [1, 0, 1, 0]) == 0.75


def test_roc_auc_needs_both_classes():
    with pytest.raises(OneClassOnly):
        roc_auc([1.0, 2.0], [1, 1])


@pytest.mark.parametrize("block", range(4))
def test_roc_auc_matches_pair_counting(block):
    g = np.random.default_rng(block)
    for _ in range(50):
        n = int(g.integers(2, 51))
        y = g.integers(0, 2, size=n)
        y[:2] = [0, 1]
        s = g.integers(0, 6, size=n).astype(float)  # coarse values force ties
        assert abs(roc_auc(s, y) - pair_count_auc(s, y)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_roc_auc_symmetry_and_monotone_invariance(seed):
    g = np.random.default_rng(seed)
    s, y = g.normal(size=40), g.integers(0, 2, size=40)
    y[:2] = [0, 1]
    assert roc_auc(s, y) + roc_auc(-s, y) == pytest.approx(1.0, abs=1e-12)
    assert roc_auc(np.exp(3 * s) + 7, y) == roc_auc(s, y)


# --- mean AD -----------------------------------------------------------------

def test_mean_ad_table_columns():
    assert f"{mean_ad(ERM_COLUMN):.1f}" == "63.0"
    assert f"{mean_ad(EAMOCO_COLUMN):.1f}" == "71.7"
    assert mean_ad([0.4] * 8) == pytest.approx(0.4, abs=1e-15)


def test_mean_ad_missing_detector():
    with pytest.raises(MissingDetector):
        mean_ad(ERM_COLUMN[:7])
    partial = {k: 0.5 for k in list(DetectorKind)[:-1]}
    with pytest.raises(MissingDetector) as err:
        mean_ad(partial)
    assert "KDE" in str(err.value)


def test_parse_pretrainer_names():
    assert parse_pretrainer("EA-MoCo") is PretrainerKind.EAMOCO
    assert parse_pretrainer("erm") is PretrainerKind.ERM
    with pytest.raises(ConfigError):
        parse_pretrainer("simclr")


# --- rendering ---------------------------------------------------------------

def _report(pretrainers, detectors, cells, seeds=(0,)):
    r = BenchmarkReport(None, "", list(pretrainers), list(detectors), list(seeds))
    for key, vals in cells.items():
        r.grid[key] = list(vals)
    return r


def test_single_cell_report_is_three_lines():
    r = _report([PretrainerKind.ERM], [DetectorKind.KNN], {(PretrainerKind.ERM, DetectorKind.KNN): [0.6312]})
    text = render_report(r)
    assert text.splitlines() == ["| Detector | ERM |", "|---|---:|", "| KNN | **63.1** |"]


def test_row_maxima_are_bold_including_ties():
    P = [PretrainerKind.ERM, PretrainerKind.IRM, PretrainerKind.EAMOCO]
    D = [DetectorKind.KNN, DetectorKind.KDE]
    cells = {(P[0], D[0]): [0.70], (P[1], D[0]): [0.70], (P[2], D[0]): [0.65],
             (P[0], D[1]): [0.50], (P[1], D[1]): [0.55], (P[2], D[1]): [0.80]}
    lines = render_report(_report(P, D, cells)).splitlines()
    assert lines[2] == "| KNN | **70.0** | **70.0** | 65.0 |"
    assert lines[3] == "| KDE | 50.0 | 55.0 | **80.0** |"
    assert lines[4].startswith(f"| **{MEAN_ROW}** |")
    assert lines[4].endswith("| **72.5** |")


def test_cells_are_seed_means_times_100():
    P, D = [PretrainerKind.ERM], [DetectorKind.KNN]
    r = _report(P, D, {(P[0], D[0]): [0.61, 0.64]}, seeds=(0, 1))
    assert "62.5" in render_report(r)


def test_csv_round_trip():
    P = [PretrainerKind.RANDOM, PretrainerKind.ERM]
    D = [DetectorKind.LODA, DetectorKind.PCA]
    g = np.random.default_rng(0)
    cells = {(p, d): g.uniform(size=2) for p in P for d in D}
    r = _report(P, D, cells, seeds=(0, 1))
    text = render_report(r, "csv")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["detector", "Random", "ERM"]
    table = parse_report_csv(text)
    for p in P:
        for d in D:
            assert table[d.title][p.title] == float(f"{100 * np.mean(cells[(p, d)]):.1f}")
    assert set(table) == {"LODA", "PCA", MEAN_ROW}


def test_meta_round_trip():
    P = [PretrainerKind.ERM, PretrainerKind.EAMOCO]
    D = [DetectorKind.KNN, DetectorKind.KDE, DetectorKind.INNE]
    g = np.random.default_rng(1)
    r = _report(P, D, {(p, d): g.uniform(size=3) for p in P for d in D}, seeds=(0, 1, 2))
    back = report_from_meta(render_meta(r))
    assert back.grid == r.grid and back.seeds == [0, 1, 2]
    assert render_report(back, "csv") == render_report(r, "csv")


def test_unknown_format():
    r = _report([PretrainerKind.ERM], [DetectorKind.KNN], {(PretrainerKind.ERM, DetectorKind.KNN): [0.5]})
    with pytest.raises(ConfigError):
        render_report(r, "html")


# --- grid --------------------------------------------------------------------

def test_benchmark_rejects_regimes_without_anomalies():
    with pytest.raises(ConfigError) as err:
        run_benchmark(ScenarioConfig(regime="A"), ["erm"], ["knn"], [0], TINY_SETTINGS)
    assert err.value.key == "regime"


@pytest.fixture(scope="module")
def tiny_report():
    return run_benchmark(TINY_SCENARIO, ["erm", "eamoco"], ["knn", "kde", "pca"], [0, 1], TINY_SETTINGS)


def test_grid_cardinality(tiny_report):
    r = tiny_report
    assert len(r.grid) == 6 and r.complete
    assert all(len(v) == 2 for v in r.grid.values())
    assert all(0.0 <= a <= 1.0 for v in r.grid.values() for a in v)
    assert set(r.timings) == {(p, s) for p in r.pretrainers for s in (0, 1)}
    got = r.mean_ad()[PretrainerKind.ERM]
    assert got == pytest.approx(np.mean([r.cell_mean(PretrainerKind.ERM, d) for d in r.detectors]))


def test_rerun_and_order_give_identical_reports(tiny_report):
    again = run_benchmark(TINY_SCENARIO, ["eamoco", "erm"], ["pca", "knn", "kde"], [0, 1], TINY_SETTINGS)
    for fmt in ("markdown", "csv"):
        assert render_report(again, fmt) == render_report(tiny_report, fmt)
    assert render_meta(again) == render_meta(tiny_report)


def test_pool_matches_serial(tiny_report):
    pooled = run_benchmark(TINY_SCENARIO, ["erm", "eamoco"], ["knn", "kde", "pca"], [0, 1],
                           TINY_SETTINGS, threads=2)
    assert render_meta(pooled) == render_meta(tiny_report)


def test_failures_are_collected_per_cell():
    # LISA cannot pair rows without a second train env; Random still works
    tiny = ScenarioConfig(n_train_envs=1, n_test_envs=1, samples_per_env=20, seed=0)
    r = run_benchmark(tiny, ["random", "lisa"], ["knn"], [0], TINY_SETTINGS)
    assert not r.complete
    assert [(p, d) for p, d, _, _ in r.failures] == [(PretrainerKind.LISA, DetectorKind.KNN)]
    assert "n/a" in render_report(r)
