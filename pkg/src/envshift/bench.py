"""ROC-AUC evaluation, the (pretrainer x detector x seed) grid and report rendering."""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata
from threadpoolctl import threadpool_limits

from .core import EnvDataset, Split, dataset_view
from .detectors import DETECTOR_ORDER, DetectorConfig, fit_detector, parse_kind, score_detector
from .eamoco import ContrastiveConfig, fit_ea_moco, train_moco_baseline
from .errors import ConfigError, EnvShiftError, MissingDetector, OneClassOnly
from .nn import MlpParams, TrainConfig, forward
from .pretrain import (D_EMB, TABLE_ORDER, PenaltyConfig, PretrainerKind, random_encoder,
                       train_erm, train_fish, train_irm, train_lisa)
from .synthgen import ScenarioConfig, generate_scenario

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("ROC-AUC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mean_ad(column, required: Optional[Sequence] = None) -> float:
    """Mean AUC over detectors for one pretrainer.

    ``column`` is either a mapping ``detector -> auc`` (every detector in
    ``required``, default all eight, must be present) or a sequence with one
    value per detector in table order.
    """
    kinds = list(DETECTOR_ORDER) if required is None else [parse_kind(k) for k in required]
    if isinstance(column, dict):
        col = {parse_kind(k): v for k, v in column.items()}
        missing = [k.title for k in kinds if k not in col]
        if missing:
            raise MissingDetector(f"no value for detector(s): {', '.join(missing)}")
        values = [col[k] for k in kinds]
    else:
        values = list(column)
        if len(values) != len(kinds):
            raise MissingDetector(f"expected {len(kinds)} detector values, got {len(values)}")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Pretrainer dispatch
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchSettings:
    train: TrainConfig = TrainConfig()
    penalty: PenaltyConfig = PenaltyConfig()
    contrastive: ContrastiveConfig = ContrastiveConfig()
    d_emb: int = D_EMB


def parse_pretrainer(name) -> PretrainerKind:
    if isinstance(name, PretrainerKind):
        return name
    key = str(name).strip().lower().replace("-", "").replace("_", "")
    for kind in PretrainerKind:
        if key in (kind.value, kind.title.lower().replace("-", "")):
            return kind
    valid = ", ".join(k.value for k in PretrainerKind)
    raise ConfigError(f"unknown pretrainer {name!r}; valid names: {valid}", key="pretrainers")


def run_pretrainer(kind, ds: EnvDataset, seed: int, settings: BenchSettings = BenchSettings()) -> MlpParams:
    kind = parse_pretrainer(kind)
    tc = replace(settings.train, seed=seed)
    if kind is PretrainerKind.RANDOM:
        return random_encoder(ds.d_x, settings.d_emb, seed)
    if kind is PretrainerKind.ERM:
        return train_erm(ds, tc, d_emb=settings.d_emb)
    if kind is PretrainerKind.IRM:
        return train_irm(ds, tc, settings.penalty, d_emb=settings.d_emb)
    if kind is PretrainerKind.FISH:
        return train_fish(ds, tc, settings.penalty, d_emb=settings.d_emb)
    if kind is PretrainerKind.LISA:
        return train_lisa(ds, tc, settings.penalty, d_emb=settings.d_emb)
    cc = replace(settings.contrastive, seed=seed)
    if kind is PretrainerKind.MOCO:
        return train_moco_baseline(ds, cc)
    return fit_ea_moco(ds, cc)


def evaluate_embeddings(E_train, E_test, y_test, detectors: Iterable[DetectorConfig]) -> dict:
    out = {}
    for cfg in detectors:
        model = fit_detector(cfg, E_train)
        out[cfg.kind] = roc_auc(score_detector(model, E_test), y_test)
    return out


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkReport:
    scenario: ScenarioConfig
    scenario_fingerprint: str
    pretrainers: list
    detectors: list
    seeds: list
    grid: dict = field(default_factory=dict)       # (pretrainer, detector) -> [auc per seed]
    failures: list = field(default_factory=list)   # (pretrainer, detector, seed, message)
    timings: dict = field(default_factory=dict)    # (pretrainer, seed) -> seconds

    @property
    def complete(self) -> bool:
        return not self.failures and all(
            len(self.grid.get((p, d), [])) == len(self.seeds)
            for p in self.pretrainers for d in self.detectors)

    def cell_mean(self, p, d) -> float:
        return float(np.mean(self.grid[(p, d)]))

    def cell_std(self, p, d) -> float:
        return float(np.std(self.grid[(p, d)]))

    def mean_ad(self) -> dict:
        return {p: mean_ad({d: self.cell_mean(p, d) for d in self.detectors}, self.detectors)
                for p in self.pretrainers}

    def per_seed_mean_ad(self, p) -> np.ndarray:
        """Mean over detectors for each seed (paired comparisons across pretrainers)."""
        return np.mean([self.grid[(p, d)] for d in self.detectors], axis=0)


def _seed_dataset(scenario: ScenarioConfig, seed: int) -> EnvDataset:
    return generate_scenario(replace(scenario, seed=int(scenario.seed) + int(seed)))


def _run_cell(args):
    scenario, kind, seed, detector_kinds, settings = args
    start = time.perf_counter()
    try:
        ds = _seed_dataset(scenario, seed)
        enc = run_pretrainer(kind, ds, seed, settings)
        X_tr, _, _ = dataset_view(ds, Split.TRAIN)
        X_te, y_te, _ = dataset_view(ds, Split.TEST)
        E_tr, E_te = forward(enc, X_tr), forward(enc, X_te)
    except EnvShiftError as exc:
        return kind, seed, {}, [(d, f"pretrainer {kind.value}: {exc}") for d in detector_kinds], \
            time.perf_counter() - start
    aucs, errs = {}, []
    for d in detector_kinds:
        try:
            aucs.update(evaluate_embeddings(E_tr, E_te, y_te, [DetectorConfig.default(d, seed=seed)]))
        except (EnvShiftError, np.linalg.LinAlgError) as exc:
            errs.append((d, str(exc)))
    return kind, seed, aucs, errs, time.perf_counter() - start


def _limit_blas_threads():
    # one BLAS thread per worker keeps floating-point reductions reproducible
    threadpool_limits(1)


def run_benchmark(scenario: ScenarioConfig, pretrainers=None, detectors=None, seeds=DEFAULT_SEEDS,
                  settings: BenchSettings = BenchSettings(), threads: int = 1) -> BenchmarkReport:
    """Fill the grid; each (pretrainer, seed) slice shares one dataset per seed.

    Cells are computed independently and assembled by key, so the result does
    not depend on ``threads`` or on execution order.
    """
    if scenario.regime not in ("C", "D"):
        raise ConfigError(f"benchmark needs anomalies in test (regime C or D), got {scenario.regime}",
                          key="regime")
    pretrainers = [parse_pretrainer(p) for p in (pretrainers or TABLE_ORDER)]
    pretrainers = sorted(set(pretrainers), key=TABLE_ORDER.index)
    detectors = [parse_kind(d) for d in (detectors or DETECTOR_ORDER)]
    detectors = sorted(set(detectors), key=DETECTOR_ORDER.index)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("at least one seed is required", key="seeds")

    report = BenchmarkReport(scenario, _seed_dataset(scenario, seeds[0]).fingerprint(),
                             pretrainers, detectors, seeds)
    tasks = [(scenario, p, s, detectors, settings) for p in pretrainers for s in seeds]
    _limit_blas_threads()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_limit_blas_threads) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]

    by_key = {(k, s): (aucs, errs, t) for k, s, aucs, errs, t in results}
    for p in pretrainers:
        for d in detectors:
            report.grid[(p, d)] = []
        for s in seeds:
            aucs, errs, t = by_key[(p, s)]
            report.timings[(p, s)] = t
            for d, msg in errs:
                report.failures.append((p, d, s, msg))
            for d in detectors:
                if d in aucs:
                    report.grid[(p, d)].append(aucs[d])
    return report


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

MEAN_ROW = "Mean AD (OOD)"


def _fmt(v) -> str:
    return f"{100.0 * v:.1f}"


def _table_rows(r: BenchmarkReport):
    """(row label, [rendered value or None per pretrainer]) in table order."""
    rows = []
    for d in r.detectors:
        rows.append((d.title, [_fmt(r.cell_mean(p, d)) if r.grid.get((p, d)) and
                               len(r.grid[(p, d)]) == len(r.seeds) else None for p in r.pretrainers]))
    if len(r.detectors) > 1:
        means = []
        for p in r.pretrainers:
            try:
                means.append(_fmt(mean_ad({d: r.cell_mean(p, d) for d in r.detectors}, r.detectors)))
            except (MissingDetector, ValueError):
                means.append(None)
        rows.append((MEAN_ROW, means))
    return rows


def render_report(r: BenchmarkReport, fmt: str = "markdown") -> str:
    rows = _table_rows(r)
    titles = [p.title for p in r.pretrainers]
    if fmt in ("markdown", "markdown-table", "md"):
        lines = ["| Detector | " + " | ".join(titles) + " |",
                 "|---|" + "---:|" * len(titles)]
        for label, vals in rows:
            present = [float(v) for v in vals if v is not None]
            top = max(present) if present else None
            cells = []
            for v in vals:
                if v is None:
                    cells.append("n/a")
                elif float(v) == top:
                    cells.append(f"**{v}**")
                else:
                    cells.append(v)
            name = f"**{label}**" if label == MEAN_ROW else label
            lines.append(f"| {name} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["detector"] + titles)
        for label, vals in rows:
            w.writerow([label] + [v if v is not None else "" for v in vals])
        return out.getvalue()
    raise ConfigError(f"unknown report format {fmt!r}")


def render_meta(r: BenchmarkReport) -> str:
    """Per-seed raw AUCs plus per-cell mean and std (full precision)."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["pretrainer", "detector", "seed", "auc"])
    for p in r.pretrainers:
        for d in r.detectors:
            vals = r.grid.get((p, d), [])
            for s, v in zip(r.seeds, vals):
                w.writerow([p.value, d.value, s, "%.17g" % v])
            if vals:
                w.writerow([p.value, d.value, "mean", "%.17g" % np.mean(vals)])
                w.writerow([p.value, d.value, "std", "%.17g" % np.std(vals)])
    for p, d, s, msg in r.failures:
        w.writerow([p.value, d.value, s, f"FAILED: {msg}"])
    return out.getvalue()


def _data_lines(text: str):
    return [line for line in text.splitlines() if line and not line.startswith("#")]


def parse_report_csv(text: str) -> dict:
    """Inverse of the csv rendering: ``{row label: {column title: float}}``."""
    reader = csv.reader(_data_lines(text))
    header = next(reader)
    table = {}
    for row in reader:
        table[row[0]] = {t: float(v) for t, v in zip(header[1:], row[1:]) if v != ""}
    return table


def report_from_meta(text: str, scenario: Optional[ScenarioConfig] = None) -> BenchmarkReport:
    """Rebuild a report from ``render_meta`` output (lines starting with # are skipped)."""
    rows = list(csv.reader(_data_lines(text)))
    if not rows or rows[0] != ["pretrainer", "detector", "seed", "auc"]:
        raise ConfigError("not a report_meta.csv file")
    pretrainers, detectors, seeds = [], [], []
    values, failures = {}, []
    for p_name, d_name, seed, value in rows[1:]:
        p, d = parse_pretrainer(p_name), parse_kind(d_name)
        if p not in pretrainers:
            pretrainers.append(p)
        if d not in detectors:
            detectors.append(d)
        if seed in ("mean", "std"):
            continue
        if int(seed) not in seeds:
            seeds.append(int(seed))
        if value.startswith("FAILED: "):
            failures.append((p, d, int(seed), value[len("FAILED: "):]))
        else:
            values[(p, d, int(seed))] = float(value)
    report = BenchmarkReport(scenario, "", pretrainers, detectors, seeds, failures=failures)
    for p in pretrainers:
        for d in detectors:
            report.grid[(p, d)] = [values[(p, d, s)] for s in seeds if (p, d, s) in values]
    return report
