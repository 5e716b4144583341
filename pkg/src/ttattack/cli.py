"""Command-line front end: pretrain, attack, deploy, verify and sweep.

Every subcommand reads an optional YAML experiment config; flags override
it. Outputs go under ``--out`` and are never overwritten without
``--force``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from . import attack, nn, verify
from .experiment import (SWEEP_AXES, ExperimentConfig, artifact_text, checkpoint_ref, make_splits, regenerate,
                         stage_attack, stage_deploy, stage_pretrain)

logger = logging.getLogger("ttattack")

FLAG_PATHS = {
    "seed": "seed",
    "out": "out",
    "mode": "attack.mode",
    "tta": "tta.method",
    "eps": "attack.epsilon",
    "gamma": "attack.gamma",
    "kappa": "attack.kappa",
    "severity": "stream.severity",
    "attacker_ratio": "stream.attacker_ratio",
    "victim_frac": "stream.victim_frac",
    "defense": "tta.defense",
}


class OutputExists(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str, help="output directory")
    p.add_argument("--mode", choices=attack.MODES, help="attack objective mode")
    p.add_argument("--tta", choices=("tent", "rpl", "entropy-filtered"), help="TTA method")
    p.add_argument("--eps", type=float, help="l-inf budget in input units")
    p.add_argument("--gamma", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--severity", type=int)
    p.add_argument("--attacker-ratio", type=float)
    p.add_argument("--victim-frac", type=float)
    p.add_argument("--defense", choices=("none", "medbn", "ema"))
    p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                   help="override any config path, e.g. attack.iterations=100 (value parsed as YAML)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttattack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the deployed model and write checkpoint.json")
    _common(p)

    p = sub.add_parser("attack", help="craft perturbations; writes artifact and curves per mode")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="defaults to <out>/checkpoint.json")
    p.add_argument("--modes", nargs="+", choices=attack.MODES, help="one artifact per listed mode")

    p = sub.add_parser("deploy", help="serve the attacked stream and write metrics")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="defaults to <out>/checkpoint.json")
    p.add_argument("--artifact", type=Path, help="defaults to <out>/artifact.json")
    p.add_argument("--no-attack", action="store_true", help="attacker rows without perturbations")

    p = sub.add_parser("verify", help="run self-check suites or replay a file from its provenance")
    p.add_argument("suites", nargs="*", default=[],
                   help=f"any of {', '.join(verify.SUITES)}; all when omitted")
    p.add_argument("--quick", action="store_true", help="fewer random instances")
    p.add_argument("--replay", type=Path, nargs="+", help="regenerate these files and compare bytes")
    p.add_argument("--out", type=str, help="write verify.json here")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("sweep", help="full pipeline over the config's sweep axes")
    _common(p)
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2",
                   help=f"sweep axis ({', '.join(SWEEP_AXES)}); values parsed as YAML")
    p.add_argument("--workers", type=int, default=1)
    return parser


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    for flag, path in FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[path] = value
    for item in getattr(args, "set", []):
        path, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects PATH=VALUE, got {item!r}")
        overrides[path.strip()] = yaml.safe_load(raw)
    axes = {}
    for item in getattr(args, "axis", []):
        name, sep, raw = item.partition("=")
        if not sep or name not in SWEEP_AXES:
            raise ValueError(f"--axis expects one of {sorted(SWEEP_AXES)}=V1,V2, got {item!r}")
        axes[name] = [yaml.safe_load(v) for v in raw.split(",")]
    if axes:
        config = config.with_overrides({f"sweep.{k}": v for k, v in axes.items()})
    return config.with_overrides(overrides)


def _write(path: Path, text: str, force: bool) -> Path:
    if path.exists() and not force:
        raise OutputExists(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _check_free(paths, force: bool) -> None:
    for path in paths:
        if path.exists() and not force:
            raise OutputExists(f"{path} exists; pass --force to overwrite")


def _load_model(path: Path):
    model, meta = nn.load_checkpoint(path)
    return model, checkpoint_ref(model, meta.get("provenance", {}))


def cmd_pretrain(config: ExperimentConfig, force: bool = False) -> dict:
    out = Path(config.out)
    _check_free([out / "checkpoint.json"], force)
    model, ckpt, summary = stage_pretrain(config)
    # the accuracy summary also lives in the checkpoint's meta block
    _write(out / "checkpoint.json", ckpt, force)
    logger.info("train accuracy %.4f, shifted accuracy %.4f", summary["train_accuracy"], summary["shifted_accuracy"])
    return summary


def _artifact_names(mode: str, per_mode: bool) -> tuple[str, str]:
    return (f"artifact-{mode}.json", f"curves-{mode}.csv") if per_mode else ("artifact.json", "curves.csv")


def cmd_attack(config: ExperimentConfig, checkpoint: Path | None = None, modes=None, force: bool = False) -> list[Path]:
    out = Path(config.out)
    checkpoint = checkpoint or out / "checkpoint.json"
    model, ckpt = _load_model(checkpoint)
    modes = list(modes or [config.attack["mode"]])
    per_mode = len(modes) > 1
    _check_free([out / n for m in modes for n in _artifact_names(m, per_mode)], force)
    splits = make_splits(config)
    written = []
    for mode in modes:
        cfg = config.with_overrides({"attack.mode": mode})
        artifact = stage_attack(cfg, model, splits, ckpt)
        art_name, curve_name = _artifact_names(mode, per_mode)
        written.append(_write(out / art_name, artifact_text(artifact), force))
        _write(out / curve_name, artifact.curves_csv(), force)
        logger.info("%s: final l_cls %.4f, l_stl %.4f", mode, artifact.curves["l_cls"][-1], artifact.curves["l_stl"][-1])
    return written


def cmd_deploy(config: ExperimentConfig, checkpoint: Path | None = None, artifact: Path | None = None,
               no_attack: bool = False, force: bool = False) -> dict:
    out = Path(config.out)
    checkpoint = checkpoint or out / "checkpoint.json"
    _check_free([out / "metrics.json", out / "per_batch.csv", out / "histograms.csv"], force)
    model, ckpt = _load_model(checkpoint)
    art = None
    if not no_attack:
        art = attack.AttackArtifact.load(artifact or out / "artifact.json")
    report = stage_deploy(config, model, art, None, ckpt)
    _write(out / "metrics.json", report.to_json(), force)
    _write(out / "per_batch.csv", report.per_batch_csv(), force)
    _write(out / "histograms.csv", report.histograms_csv(), force)
    summary = {"asr": report.asr, "ba": report.ba, "baseline_ba": report.baseline_ba, "label_kl": report.label_kl}
    logger.info("asr %s, ba %.4f (baseline %.4f), label kl %.5f",
                "undefined" if report.asr is None else f"{report.asr:.4f}", report.ba, report.baseline_ba, report.label_kl)
    return summary


def cmd_verify(suites, quick: bool = False, replay=None, out: str | None = None, force: bool = False) -> bool:
    unknown = set(suites) - set(verify.SUITES)
    if unknown:
        raise ValueError(f"unknown suites {sorted(unknown)}; choose from {verify.SUITES}")
    results = []
    if replay:
        for path in replay:
            same = regenerate(Path(path).read_text()) == Path(path).read_text()
            results.append(verify.SuiteResult(f"replay {path}", same, {"bit_identical": same}))
    if suites or not replay:
        for name in suites or verify.SUITES:
            results.append(verify.run_suite(name, quick=quick))
    for r in results:
        print(r.line())
    if out:
        payload = [{"suite": r.name, "passed": r.passed, "metrics": r.metrics} for r in results]
        _write(Path(out) / "verify.json", json.dumps(payload, sort_keys=True, indent=1, default=float), force)
    return all(r.passed for r in results)


def _sweep_point(args) -> dict:
    config_dict, name = args
    config = ExperimentConfig.from_dict(config_dict)
    out = Path(config.out)
    splits = make_splits(config)
    model, ckpt, summary = stage_pretrain(config, splits)
    ref = checkpoint_ref(model, json.loads(ckpt)["meta"]["provenance"])
    artifact = stage_attack(config, model, splits, ref)
    art_text = artifact_text(artifact)
    report = stage_deploy(config, model, artifact, splits, ref)
    (out / "checkpoint.json").write_text(ckpt)
    (out / "artifact.json").write_text(art_text)
    (out / "curves.csv").write_text(artifact.curves_csv())
    (out / "metrics.json").write_text(report.to_json())
    (out / "per_batch.csv").write_text(report.per_batch_csv())
    (out / "histograms.csv").write_text(report.histograms_csv())
    return {"run": name, "asr": report.asr, "ba": report.ba, "baseline_ba": report.baseline_ba,
            "label_kl": report.label_kl, "train_accuracy": summary["train_accuracy"]}


def _point_name(point: dict) -> str:
    if not point:
        return "base"
    return "_".join(f"{path.split('.')[-1]}={value}" for path, value in point.items())


def cmd_sweep(config: ExperimentConfig, workers: int = 1, force: bool = False) -> list[dict]:
    out = Path(config.out)
    jobs = []
    for point in config.sweep_axes().points():
        name = _point_name(point)
        run_dir = out / name
        if run_dir.exists() and any(run_dir.iterdir()) and not force:
            raise OutputExists(f"{run_dir} is not empty; pass --force to overwrite")
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg = config.with_overrides({**point, "out": str(run_dir)})
        jobs.append((cfg.to_dict(), name))
    _check_free([out / "summary.csv"], force)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    cols = ["run", "asr", "ba", "baseline_ba", "label_kl", "train_accuracy"]
    lines = [",".join(cols)] + [",".join("" if r[c] is None else str(r[c]) for c in cols) for r in rows]
    _write(out / "summary.csv", "\n".join(lines) + "\n", force)
    for r in rows:
        logger.info("%s: asr %s, label kl %.5f", r["run"], r["asr"], r["label_kl"])
    return rows


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "verify":
            return 0 if cmd_verify(args.suites, args.quick, args.replay, args.out, args.force) else 1
        config = load_config(args)
        if args.command == "pretrain":
            print(json.dumps(cmd_pretrain(config, args.force), sort_keys=True))
        elif args.command == "attack":
            cmd_attack(config, args.checkpoint, args.modes, args.force)
        elif args.command == "deploy":
            cmd_deploy(config, args.checkpoint, args.artifact, args.no_attack, args.force)
        elif args.command == "sweep":
            cmd_sweep(config, args.workers, args.force)
    except (OutputExists, ValueError, FileNotFoundError, nn.PretrainError) as exc:
        logger.error("error: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
