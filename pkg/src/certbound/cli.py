"""``certbound`` command line: rollout, certify, sweep and report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import __version__
from .certification import CertificateReport, certify, method_label
from .config import DEFAULT_DEPTH, METHOD_TAGS, ConfigError, PipelineConfig, load_config
from .fileio import atomic_write_text
from .metrics import RunRecord, aggregate, summary_csv
from .rollout import (
    DatasetError,
    LabeledDataset,
    PolicySpec,
    collect_dataset,
    load_dataset,
    make_split_plan,
    save_dataset,
    TEST_STREAM,
    VALID_STREAM,
)

__all__ = [
    "main",
    "build_parser",
    "rollout_datasets",
    "run_certification",
    "report_payload",
    "record_from_payload",
    "Cell",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DATA",
    "EXIT_NUMERIC",
]

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

REPORT_FORMAT = "certbound.report"
SUMMARY_KEYS = ("tier", "method", "episodes")


# ---------------------------------------------------------------- library-level helpers

def rollout_datasets(cfg: PipelineConfig, instance: int | None = None,
                     n_valid: int | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    """Validation and test sets for one policy instance.

    Episodes are seeded by ``data_seed + instance``; the test set is
    normalized by the validation maximum.
    """
    inst = cfg.instance if instance is None else instance
    policy = PolicySpec.for_instance(cfg.tier, inst)
    seed = cfg.data_seed + inst
    valid = collect_dataset(cfg.env, policy, n_valid or cfg.valid_episodes, cfg.stride, seed, stream=VALID_STREAM)
    test = collect_dataset(cfg.env, policy, cfg.test_episodes, cfg.stride, seed, stream=TEST_STREAM,
                           g_max=valid.g_max)
    return valid, test


def run_certification(cfg: PipelineConfig, valid: LabeledDataset, test: LabeledDataset | None,
                      seed: int) -> CertificateReport:
    # architecture input width follows the data, so loaded datasets need not match [env]
    arch = cfg.architecture()
    arch = type(arch)(valid.features.shape[1], arch.hidden_dims, arch.output_dim)
    depth = cfg.effective_depth
    n_eps = len(valid.episode_ids)
    if depth > n_eps:
        raise ConfigError(f"depth {depth} exceeds {n_eps} validation episodes")
    plan = make_split_plan(n_eps, depth)
    return certify(valid, plan, cfg.method_name, arch=arch, train=cfg.train, cert=cfg.cert, seed=seed, test=test)


def report_payload(report: CertificateReport, cfg: PipelineConfig, *, instance: int, repetition: int,
                   episodes: int, sources: dict | None = None) -> dict:
    """Report JSON: the certificate fields, run identifiers and the config echo."""
    d = report.to_dict()
    scale = report.g_max**2
    d.update({
        "format": REPORT_FORMAT,
        "version": __version__,
        "method_label": method_label(report.method, report.depth),
        "episode_counts": list(report.episode_counts),
        "raw": {
            "loss_scale": scale,
            "final_bound": report.final_bound * scale,
            "train_loss": report.train_loss * scale,
            "test_loss": None if report.test_loss is None else report.test_loss * scale,
        },
        "run": {"tier": cfg.tier, "instance": instance, "repetition": repetition, "episodes": episodes,
                "env": cfg.env.kind, "sources": sources or {}},
        "config": cfg.to_ini(),
    })
    return d


def record_from_payload(d: dict) -> RunRecord:
    if d.get("test_loss") is None:
        raise DatasetError("report has no test loss; certify with a test set to aggregate it")
    run = d["run"]
    return RunRecord(instance=run["instance"], repetition=run["repetition"], tier=run["tier"],
                     method=d["method_label"], bound=d["final_bound"], train_loss=d["train_loss"],
                     test_loss=d["test_loss"], episodes=run["episodes"])


def _slug(cfg: PipelineConfig) -> str:
    return f"rec{cfg.effective_depth}" if cfg.method == "rec" else cfg.method


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


# ---------------------------------------------------------------- subcommands

def cmd_rollout(cfg: PipelineConfig, out: Path) -> tuple[Path, Path]:
    out = _ensure_dir(out)
    valid, test = rollout_datasets(cfg)
    paths = out / "valid.csv", out / "test.csv"
    for ds, p in zip((valid, test), paths):
        save_dataset(ds, p)
        atomic_write_text(p.with_suffix(".ini"), cfg.to_ini())
    print(f"valid: {len(valid)} samples from {valid.n_episodes} episodes -> {paths[0]}")
    print(f"test: {len(test)} samples from {test.n_episodes} episodes -> {paths[1]}")
    return paths


def cmd_certify(cfg: PipelineConfig, out: Path, valid_path: Path | None, test_path: Path | None) -> list[Path]:
    out = _ensure_dir(out)
    if valid_path is None:
        valid_path = out / "valid.csv"
        if not valid_path.exists():
            cmd_rollout(cfg, out)
        if test_path is None and (out / "test.csv").exists():
            test_path = out / "test.csv"
    valid = load_dataset(valid_path)
    test = None if test_path is None else load_dataset(test_path).renormalized(valid.g_max)
    reports = _ensure_dir(out / "reports")
    written = []
    for rep in range(cfg.reps):
        seed = cfg.seed + rep
        cell_cfg = cfg.replace(seed=seed, reps=1, valid_episodes=len(valid.episode_ids))
        report = run_certification(cell_cfg, valid, test, seed)
        payload = report_payload(report, cell_cfg, instance=cfg.instance, repetition=rep,
                                 episodes=len(valid.episode_ids),
                                 sources={"valid": str(valid_path), "test": None if test_path is None else str(test_path)})
        path = reports / f"{_slug(cfg)}_s{seed}.json"
        _write_json(path, payload)
        written.append(path)
        test_txt = "" if report.test_loss is None else f" test={report.test_loss:.6f}"
        print(f"{payload['method_label']} seed={seed}: bound={report.final_bound:.6f}{test_txt} -> {path}")
    return written


@dataclass(frozen=True)
class Cell:
    instance: int
    size: int
    method: str
    depth: int
    repetition: int

    @property
    def filename(self) -> str:
        slug = f"rec{self.depth}" if self.method == "rec" else self.method
        return f"i{self.instance}_n{self.size}_{slug}_r{self.repetition}.json"


def parse_methods(spec: str) -> list[tuple[str, int]]:
    """``"nonrec-noninf,nonrec-inf,rec:2,rec:6"`` -> [(tag, depth), ...]."""
    out = []
    for item in filter(None, (s.strip().lower() for s in spec.split(","))):
        tag, _, depth = item.partition(":")
        if tag not in METHOD_TAGS:
            raise ConfigError(f"unknown method {tag!r}")
        try:
            out.append((tag, int(depth) if depth else DEFAULT_DEPTH[tag]))
        except ValueError as exc:
            raise ConfigError(f"bad depth in {item!r}") from exc
    if not out:
        raise ConfigError("no methods given")
    return out


def parse_ints(spec: str, what: str) -> list[int]:
    try:
        vals = [int(s) for s in spec.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad {what} list {spec!r}") from exc
    if not vals:
        raise ConfigError(f"empty {what} list")
    return vals


def cmd_sweep(cfg: PipelineConfig, out: Path, sizes: Sequence[int], methods: Sequence[tuple[str, int]],
              instances: Sequence[int]) -> Path:
    """Grid over instances x sizes x methods x repetitions; existing reports are kept."""
    if any(s < 1 for s in sizes):
        raise ConfigError("validation sizes must be positive")
    for _, depth in methods:
        if depth > min(sizes):
            raise ConfigError(f"depth {depth} exceeds the smallest validation size {min(sizes)}")
    out = _ensure_dir(out)
    reports = _ensure_dir(out / "reports")
    data_dir = _ensure_dir(out / "data")
    records = []
    for inst in instances:
        base = cfg.replace(instance=inst, valid_episodes=max(sizes))
        cache = None
        for size in sizes:
            for tag, depth in methods:
                for rep in range(cfg.reps):
                    cell = Cell(inst, size, tag, depth, rep)
                    path = reports / cell.filename
                    if path.exists():
                        records.append(record_from_payload(_read_report(path)))
                        continue
                    if cache is None:
                        cache = rollout_datasets(base)
                        for ds, name in zip(cache, ("valid", "test")):
                            p = data_dir / f"i{inst}_{name}.csv"
                            save_dataset(ds, p)
                            atomic_write_text(p.with_suffix(".ini"), base.to_ini())
                    valid_full, test_full = cache
                    valid = valid_full.first_episodes(size)
                    test = test_full.renormalized(valid.g_max)
                    seed = cfg.seed + rep
                    cell_cfg = base.replace(method=tag, depth=depth, seed=seed, reps=1, valid_episodes=size)
                    report = run_certification(cell_cfg, valid, test, seed)
                    payload = report_payload(report, cell_cfg, instance=inst, repetition=rep, episodes=size)
                    _write_json(path, payload)
                    records.append(record_from_payload(payload))
                    print(f"{cell.filename}: bound={report.final_bound:.6f} test={report.test_loss:.6f}", flush=True)
    summary = out / "summary.csv"
    _write_summary(records, summary, cfg)
    print(f"summary of {len(records)} runs -> {summary}")
    return summary


def _summary_rows(records: Sequence[RunRecord]):
    return sorted(aggregate(records, SUMMARY_KEYS), key=lambda r: r.key)


def _write_summary(records: Sequence[RunRecord], path: Path, cfg: PipelineConfig | None) -> None:
    rows = _summary_rows(records)
    atomic_write_text(path, summary_csv(rows, SUMMARY_KEYS))
    _write_json(path.with_suffix(".json"), [r.as_dict(SUMMARY_KEYS) for r in rows])
    if cfg is not None:
        atomic_write_text(path.with_suffix(".ini"), cfg.to_ini())


def _read_report(path: Path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read report {path}: {exc}") from exc
    if not isinstance(d, dict) or d.get("format") != REPORT_FORMAT:
        raise DatasetError(f"{path} is not a certbound report")
    try:
        CertificateReport.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"report {path} is missing fields: {exc}") from exc
    return d


def cmd_report(paths: Sequence[Path], out: Path | None) -> str:
    files: list[Path] = []
    for p in paths:
        if p.is_dir():
            sub = p / "reports" if (p / "reports").is_dir() else p
            files.extend(sorted(sub.glob("*.json")))
        else:
            files.append(p)
    if not files:
        raise DatasetError("no report files found")
    records = [record_from_payload(_read_report(f)) for f in files]
    text = summary_csv(_summary_rows(records), SUMMARY_KEYS)
    if out is not None:
        _write_summary(records, _ensure_dir(out) / "summary.csv", None)
    sys.stdout.write(text)
    return text


# ---------------------------------------------------------------- argument handling

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--env", choices=("chain", "line"))
    common.add_argument("--tier", choices=("starter", "intermediate", "expert"))
    common.add_argument("--method", choices=sorted(METHOD_TAGS))
    common.add_argument("--depth", type=int, help="recursion depth (rec only)")
    common.add_argument("--episodes", type=int, help="validation episodes")
    common.add_argument("--test-episodes", type=int)
    common.add_argument("--instance", type=int, help="policy instance")
    common.add_argument("--seed", type=int, help="root seed (overrides the config file and CERTBOUND_SEED)")
    common.add_argument("--reps", type=int, help="repetitions; seeds are root seed + index")
    common.add_argument("--out", type=Path, help="output directory")

    p = argparse.ArgumentParser(prog="certbound", description="Risk certificates for return predictors.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("rollout", parents=[common], help="collect validation and test datasets")
    c = sub.add_parser("certify", parents=[common], help="certify one configuration")
    c.add_argument("--valid", type=Path, help="validation CSV (default <out>/valid.csv, rolled out if absent)")
    c.add_argument("--test", type=Path, help="test CSV (default <out>/test.csv if present)")
    s = sub.add_parser("sweep", parents=[common], help="grid over sizes, methods, repetitions")
    s.add_argument("--sizes", default="25,50,100", help="validation sizes (episodes)")
    s.add_argument("--methods", default="nonrec-noninf,nonrec-inf,rec:2,rec:6",
                   help="comma list of method[:depth]")
    s.add_argument("--instances", help="comma list of policy instances (default: config instance)")
    r = sub.add_parser("report", help="aggregate report JSON files into a summary")
    r.add_argument("paths", nargs="+", type=Path, help="report files or directories")
    r.add_argument("--out", type=Path, help="also write summary.csv/.json here")
    return p


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.env is not None and args.env != cfg.env.kind:
        # switching environments resets its parameters to that kind's defaults
        changes["env"] = type(cfg.env)(kind=args.env, horizon=cfg.env.horizon, gamma=cfg.env.gamma)
    for flag, name in (("tier", "tier"), ("episodes", "valid_episodes"), ("test_episodes", "test_episodes"),
                       ("instance", "instance"), ("seed", "seed"), ("reps", "reps")):
        if getattr(args, flag) is not None:
            changes[name] = getattr(args, flag)
    if args.method is not None:
        changes["method"] = args.method
        if args.depth is None and args.method != cfg.method:
            changes["depth"] = None
    if args.depth is not None:
        changes["depth"] = args.depth
    if args.out is not None:
        changes["out"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.paths, args.out)
            return EXIT_OK
        cfg = resolve_config(args)
        out = Path(cfg.out)
        if args.command == "rollout":
            cmd_rollout(cfg, out)
        elif args.command == "certify":
            cmd_certify(cfg, out, args.valid, args.test)
        elif args.command == "sweep":
            instances = parse_ints(args.instances, "instance") if args.instances else [cfg.instance]
            cmd_sweep(cfg, out, parse_ints(args.sizes, "size"), parse_methods(args.methods), instances)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, OverflowError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation errors come from inconsistent settings
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
