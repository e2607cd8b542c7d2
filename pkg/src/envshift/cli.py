"""Command-line entry point: gen, pretrain, embed, score, bench, report, replay.

Config files are flat ``key = value`` lines; ``#`` starts a comment.  Flags
(including repeated ``--set key=value``) override file keys.  Every relative
path is resolved against ``--workdir``.  Each command writes a run manifest
before doing any work; ``replay`` re-runs a command from its manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bench import (DEFAULT_SEEDS, BenchSettings, parse_pretrainer, render_meta, render_report,
                    report_from_meta, run_benchmark, run_pretrainer)
from .core import Split, dataset_view, load_dataset, save_dataset
from .detectors import DetectorConfig, fit_detector, parse_kind, score_detector
from .eamoco import ContrastiveConfig
from .errors import ConfigError, EnvShiftError
from .nn import TrainConfig, forward, load_params, save_params
from .pretrain import D_EMB, PenaltyConfig
from .synthgen import ScenarioConfig, generate_scenario

SEED_ENV_VAR = "ENVSHIFT_SEED"
GEN_REQUIRED = ("regime",)
BENCH_KEYS = ("pretrainers", "detectors", "seeds", "threads")
SETTING_SECTIONS = {"train": TrainConfig, "penalty": PenaltyConfig, "contrastive": ContrastiveConfig}

EXIT_ERROR = 1
EXIT_PARTIAL = 3


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into an ordered dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key=key)
        out[key] = value
    return out


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        out[key] = value
    return out


def _convert(kind: str, key: str, raw):
    try:
        if kind == "bool":
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}", key=key) from exc


def _with_overrides(obj, prefix: str, values: dict):
    kinds = {f.name: f.type for f in fields(obj)}
    changes = {}
    for key, raw in values.items():
        name = key[len(prefix) + 1:]
        if name not in kinds or name == "seed":
            raise ConfigError(f"unknown key {key!r}", key=key)
        changes[name] = _convert(kinds[name], key, raw)
    return replace(obj, **changes)


def _split_list(text: str) -> list:
    return [part.strip() for part in str(text).split(",") if part.strip()]


def _env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or not raw.strip():
        return None
    return _convert("int", SEED_ENV_VAR, raw)


@dataclass
class ResolvedConfig:
    scenario: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)

    def merged(self) -> dict:
        return {**self.scenario, **self.settings, **self.bench}


def resolve_config(path: Optional[Path], overrides: dict) -> ResolvedConfig:
    values = parse_config_text(path.read_text()) if path is not None else {}
    values.update(overrides)
    scenario_keys = {f.name for f in fields(ScenarioConfig)}
    out = ResolvedConfig()
    for key, value in values.items():
        if key in scenario_keys:
            out.scenario[key] = value
        elif key in BENCH_KEYS:
            out.bench[key] = value
        elif key == "d_emb" or key.split(".", 1)[0] in SETTING_SECTIONS and "." in key:
            out.settings[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}", key=key)
    if "seed" not in out.scenario:
        seed = _env_seed()
        if seed is not None:
            out.scenario["seed"] = str(seed)
    return out


def build_settings(values: dict) -> BenchSettings:
    settings = BenchSettings()
    d_emb = _convert("int", "d_emb", values["d_emb"]) if "d_emb" in values else D_EMB
    for section, cls in SETTING_SECTIONS.items():
        own = {k: v for k, v in values.items() if k.startswith(section + ".")}
        if own:
            current = getattr(settings, section)
            settings = replace(settings, **{section: _with_overrides(current, section, own)})
    return replace(settings, d_emb=d_emb)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list
    inputs: dict      # workdir-relative path -> git blob hash
    argv: list
    version: str = __version__

    def content_hash(self) -> str:
        """Hash of everything that determines the outputs (not execution knobs)."""
        body = {"command": self.command, "config": self.config, "seeds": self.seeds,
                "inputs": self.inputs, "version": self.version}
        return git_blob_hash(json.dumps(body, sort_keys=True).encode())

    def to_json(self) -> str:
        body = {"command": self.command, "config": self.config, "seeds": self.seeds,
                "inputs": self.inputs, "argv": self.argv, "version": self.version,
                "hash": self.content_hash()}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        return cls(d["command"], d["config"], d["seeds"], d["inputs"], d["argv"], d["version"])


class Context:
    def __init__(self, args):
        self.args = args
        self.workdir = Path(args.workdir).resolve()

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def rel(self, p: Path) -> str:
        try:
            return str(p.resolve().relative_to(self.workdir))
        except ValueError:
            return str(p.resolve())

    def write_manifest(self, target: Path, config: dict, seeds, inputs) -> RunManifest:
        hashes = {self.rel(p): git_blob_hash(p.read_bytes()) for p in inputs if p is not None}
        m = RunManifest(self.args.command, {k: str(v) for k, v in config.items()},
                        [int(s) for s in seeds], hashes, list(self.args.argv))
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(m.to_json())
        return m


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _scenario(resolved: ResolvedConfig, required=()) -> ScenarioConfig:
    for key in required:
        if key not in resolved.scenario:
            raise ConfigError(f"missing required key {key!r}", key=key)
    if "seed" not in resolved.scenario:
        raise ConfigError(f"missing required key 'seed' (set it in the config, with --seed, "
                          f"or via {SEED_ENV_VAR})", key="seed")
    return ScenarioConfig.from_mapping(resolved.scenario)


def _overrides(args) -> dict:
    values = _parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    return values


def _config_path(ctx: Context):
    return ctx.path(ctx.args.config) if getattr(ctx.args, "config", None) else None


def cmd_gen(ctx: Context) -> int:
    cfg_path = _config_path(ctx)
    resolved = resolve_config(cfg_path, _overrides(ctx.args))
    if resolved.bench or resolved.settings:
        key = next(iter({**resolved.bench, **resolved.settings}))
        raise ConfigError(f"key {key!r} does not apply to gen", key=key)
    scenario = _scenario(resolved, GEN_REQUIRED)
    out = ctx.path(ctx.args.out)
    ctx.write_manifest(_sidecar(out), scenario.as_mapping(), [scenario.seed], [cfg_path])
    save_dataset(generate_scenario(scenario), out)
    print(f"wrote {ctx.rel(out)}")
    return 0


def _seed_arg(args, default=0) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = _env_seed()
    return default if env is None else env


def checkpoint_name(pretrainer, scenario_hash: str, seed: int) -> str:
    return f"{parse_pretrainer(pretrainer).value}-{scenario_hash}-{seed}.model"


def cmd_pretrain(ctx: Context) -> int:
    args = ctx.args
    kind = parse_pretrainer(args.pretrainer)
    cfg_path = _config_path(ctx)
    resolved = resolve_config(cfg_path, _parse_set(args.set))
    settings = build_settings(resolved.settings)
    seed = _seed_arg(args)
    data = ctx.path(args.data)
    ds = load_dataset(data)
    out = ctx.path(args.out_dir) / checkpoint_name(kind, ds.fingerprint(), seed)
    ctx.write_manifest(_sidecar(out), {"pretrainer": kind.value, **resolved.settings}, [seed],
                       [data, cfg_path])
    save_params(run_pretrainer(kind, ds, seed, settings), out)
    print(f"wrote {ctx.rel(out)}")
    return 0


def _split(args) -> Split:
    split = Split[args.split.upper()]
    if split is Split.TRAIN and not args.allow_train:
        raise ConfigError("refusing to use the train split without --allow-train", key="split")
    return split


def _encode(model_path: Optional[Path], X):
    return X if model_path is None else forward(load_params(model_path), X)


def _write_rows(path: Path, M) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in np.atleast_2d(M):
            fh.write(" ".join("%.17g" % v for v in row) + "\n")


def cmd_embed(ctx: Context) -> int:
    args = ctx.args
    data, model = ctx.path(args.data), ctx.path(args.model)
    out = ctx.path(args.out)
    ctx.write_manifest(_sidecar(out), {"split": args.split}, [], [data, model])
    X, _, _ = dataset_view(load_dataset(data), Split[args.split.upper()])
    _write_rows(out, _encode(model, X))
    print(f"wrote {ctx.rel(out)}")
    return 0


def cmd_score(ctx: Context) -> int:
    args = ctx.args
    split = _split(args)
    kind = parse_kind(args.detector)
    params = {k: _convert_param(v) for k, v in _parse_set(args.param).items()}
    seed = _seed_arg(args)
    cfg = DetectorConfig.default(kind, seed=seed, **params)
    data = ctx.path(args.data)
    model = ctx.path(args.model) if args.model else None
    out = ctx.path(args.out)
    ctx.write_manifest(_sidecar(out), {"detector": cfg.describe(), "split": split.name.lower()},
                       [seed], [data, model])
    ds = load_dataset(data)
    X_tr, _, _ = dataset_view(ds, Split.TRAIN)
    X, _, _ = dataset_view(ds, split)
    fitted = fit_detector(cfg, _encode(model, X_tr))
    scores = score_detector(fitted, _encode(model, X))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join("%.17g\n" % s for s in scores))
    print(f"wrote {len(scores)} scores to {ctx.rel(out)}")
    return 0


def _convert_param(raw: str):
    for kind in ("int", "float"):
        try:
            return _convert(kind, "param", raw)
        except ConfigError:
            pass
    return raw


def cmd_bench(ctx: Context) -> int:
    args = ctx.args
    cfg_path = _config_path(ctx)
    overrides = _overrides(args)
    for key in BENCH_KEYS:
        if getattr(args, key, None) is not None:
            overrides[key] = str(getattr(args, key))
    resolved = resolve_config(cfg_path, overrides)
    scenario = _scenario(resolved)
    settings = build_settings(resolved.settings)
    bench = resolved.bench
    pretrainers = [parse_pretrainer(p) for p in _split_list(bench["pretrainers"])] \
        if "pretrainers" in bench else None
    detectors = [parse_kind(d) for d in _split_list(bench["detectors"])] if "detectors" in bench else None
    seeds = [_convert("int", "seeds", s) for s in _split_list(bench["seeds"])] \
        if "seeds" in bench else list(DEFAULT_SEEDS)
    threads = _convert("int", "threads", bench.get("threads", 1))
    if threads < 1:
        raise ConfigError("threads must be >= 1", key="threads")

    out_dir = ctx.path(args.out_dir)
    # threads only changes how the grid is executed, so it stays out of the hash
    hashed = {k: v for k, v in resolved.merged().items() if k != "threads"}
    hashed.update({k: str(v) for k, v in scenario.as_mapping().items()})
    if pretrainers is not None:
        hashed["pretrainers"] = ",".join(p.value for p in pretrainers)
    if detectors is not None:
        hashed["detectors"] = ",".join(d.value for d in detectors)
    manifest = ctx.write_manifest(out_dir / "manifest.json", hashed, seeds, [cfg_path])
    tag = manifest.content_hash()

    report = run_benchmark(scenario, pretrainers, detectors, seeds, settings, threads=threads)
    (out_dir / "report.md").write_text(_report_header(report, tag, threads) + render_report(report))
    (out_dir / "report.csv").write_text(f"# manifest {tag}\n" + render_report(report, "csv"))
    (out_dir / "report_meta.csv").write_text(f"# manifest {tag}\n" + render_meta(report))
    print(render_report(report), end="")
    if report.failures:
        for p, d, s, msg in report.failures:
            print(f"FAILED {p.value}/{d.value} seed {s}: {msg}", file=sys.stderr)
        print("partial report: some cells failed", file=sys.stderr)
        return EXIT_PARTIAL
    return 0


def _report_header(report, tag: str, threads: int) -> str:
    scenario = " ".join(f"{k}={v}" for k, v in report.scenario.as_mapping().items())
    lines = [f"<!-- manifest {tag} -->", "",
             f"Scenario: {scenario} (fingerprint of first seed: {report.scenario_fingerprint})",
             f"Seeds: {', '.join(str(s) for s in report.seeds)}",
             f"Workers: {threads}; BLAS threads per worker: 1", "", "Detectors:", ""]
    lines += [f"- {DetectorConfig.default(d).describe()}" for d in report.detectors]
    return "\n".join(lines) + "\n\n"


def cmd_report(ctx: Context) -> int:
    args = ctx.args
    run_dir = ctx.path(args.run_dir)
    meta = run_dir / "report_meta.csv"
    if not meta.exists():
        raise ConfigError(f"no report_meta.csv in {ctx.rel(run_dir)}")
    report = report_from_meta(meta.read_text())
    text = render_report(report, "csv" if args.format == "csv" else "markdown")
    if args.out:
        out = ctx.path(args.out)
        ctx.write_manifest(_sidecar(out), {"format": args.format}, report.seeds, [meta])
        out.write_text(text)
    else:
        print(text, end="")
    return 0


def cmd_replay(ctx: Context) -> int:
    path = ctx.path(ctx.args.manifest)
    m = RunManifest.from_json(path.read_text())
    for rel, digest in m.inputs.items():
        p = ctx.path(rel)
        if not p.exists() or git_blob_hash(p.read_bytes()) != digest:
            raise ConfigError(f"input {rel} changed since the manifest was written")
    return main(["--workdir", str(ctx.workdir), *m.argv])


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "embed": cmd_embed, "score": cmd_score,
            "bench": cmd_bench, "report": cmd_report, "replay": cmd_replay}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="envshift", description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default=".", help="base directory for relative paths")
    ap.add_argument("--version", action="version", version=f"envshift {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key=value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=None, help=f"seed (fallback: ${SEED_ENV_VAR})")
        return p

    p = common(sub.add_parser("gen", help="generate a dataset"))
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("pretrain", help="train an encoder and save a checkpoint"))
    p.add_argument("--data", required=True)
    p.add_argument("--pretrainer", required=True)
    p.add_argument("--out-dir", default="models")

    p = sub.add_parser("embed", help="write embeddings of one split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("score", help="fit a detector on train, score a split"), config=False)
    p.add_argument("--model", help="encoder checkpoint (omit to score raw features)")
    p.add_argument("--data", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="detector parameter")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--allow-train", action="store_true")
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("bench", help="run the pretrainer x detector x seed grid"))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--pretrainers")
    p.add_argument("--detectors")
    p.add_argument("--seeds")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("report", help="re-render a bench run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.add_argument("--out")

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    return ap


def _strip_workdir(argv: list) -> list:
    out, skip = [], False
    for i, a in enumerate(argv):
        if skip:
            skip = False
            continue
        if a == "--workdir":
            skip = True
            continue
        if a.startswith("--workdir="):
            continue
        out.append(a)
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = _strip_workdir(argv)
    try:
        return COMMANDS[args.command](Context(args))
    except EnvShiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
