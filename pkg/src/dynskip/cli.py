"""Command-line driver: ``gen``, ``search``, ``oracle``, ``report``, ``eval``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .bandit import SearchAbort
from .data import Splits
from .network import PrunedNetwork, SkippableNetwork, SkipMask, flop_report
from .pipeline import ConfigError, DASPipeline, SearchConfig, SearchReport, evaluate, finetune_mask, random_skip_baseline
from .planted import MAX_ORACLE_N, GenerationError, PlantedSpec, SpecError, gen_dataset, gen_pretrained, oracle_best_skip_set

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4

OUTPUT_ROOT_ENV = "DYNSKIP_OUTPUT_ROOT"

log = logging.getLogger("dynskip")


class ParseError(Exception):
    pass


class ValidationError(Exception):
    pass


def _out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _owner_alive(lock: Path) -> bool:
    try:
        pid = int(lock.read_text().strip())
    except (OSError, ValueError):
        return True
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextlib.contextmanager
def _locked(out: Path):
    """Own ``out`` for the duration of a command; a lock left by a dead process is reclaimed."""
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        if _owner_alive(lock):
            raise ValidationError(f"{out} is locked by another run (remove {lock} if stale)") from None
        lock.unlink(missing_ok=True)
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _hash_inputs(paths: list[Path], extra: dict) -> str:
    h = hashlib.sha256()
    for p in sorted(paths, key=str):
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            h.update(f.name.encode())
            h.update(f.read_bytes())
    h.update(json.dumps(extra, sort_keys=True).encode())
    return h.hexdigest()


def _write_manifest(out: Path, command: str, inputs: list[Path], args: dict, seed, started: float, timings=None):
    manifest = {
        "command": command,
        "args": args,
        "config_path": args.get("config"),
        "seed": seed,
        "input_hash": _hash_inputs(inputs, {"command": command, **args}),
        "output_dir": str(out),
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "wall_clock": timings or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _load_checkpoint(path: str) -> SkippableNetwork:
    try:
        return SkippableNetwork.load(path)
    except FileNotFoundError:
        raise ValidationError(f"checkpoint {path} not found") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise ParseError(f"checkpoint {path}: {exc}") from exc


def _load_splits(path: str) -> Splits:
    try:
        return Splits.load(path)
    except FileNotFoundError as exc:
        raise ValidationError(str(exc)) from None


def cmd_gen(args) -> None:
    started = time.time()
    try:
        spec = PlantedSpec.load(args.spec)
    except FileNotFoundError:
        raise ValidationError(f"spec {args.spec} not found") from None
    except SpecError as exc:
        raise ParseError(str(exc)) from exc
    out = _out_dir(args.out)
    with _locked(out):
        splits = gen_dataset(spec)
        try:
            net = gen_pretrained(spec, splits)
        except GenerationError as exc:
            raise ValidationError(f"{exc}; try another seed") from exc
        net.save(out / "checkpoint.json")
        splits.save(out / "data")
        (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
        _write_manifest(out, "gen", [Path(args.spec)], {"spec": args.spec}, spec.seed, started)
    print(f"wrote {out / 'checkpoint.json'} and {out / 'data'}")


def _search_config(args) -> SearchConfig:
    try:
        cfg = SearchConfig.load(args.config).to_dict()
    except FileNotFoundError:
        raise ValidationError(f"config {args.config} not found") from None
    except ConfigError as exc:
        raise ParseError(str(exc)) from exc
    overrides = {"m": args.skip, "c": args.candidates, "interval": args.interval, "seed": args.seed}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SearchConfig(**cfg)
    except ConfigError as exc:
        raise ValidationError(str(exc)) from exc


def cmd_search(args) -> None:
    started = time.time()
    cfg = _search_config(args)
    net = _load_checkpoint(args.checkpoint)
    splits = _load_splits(args.data)
    if net.n != cfg.n:
        raise ValidationError(f"config n={cfg.n} but checkpoint has n={net.n}")
    if splits.train.X.shape[1] != net.input_dim:
        raise ValidationError(f"data width {splits.train.X.shape[1]} but checkpoint expects {net.input_dim}")
    out = _out_dir(args.out)
    with _locked(out):
        pipe = DASPipeline(net, cfg, splits.train, splits.val)
        report = pipe.run(splits.test, out / "trajectory.csv")
        report.save(out / "report.json")
        pipe.pruned.save(out / "pruned.json", flop_report(pipe.net, pipe.final_mask))
        (out / "progress.log").write_text("".join(line + "\n" for line in pipe.log_lines))
        timings = dict(report.wall_clock)
        if args.random_baseline:
            t0 = time.perf_counter()
            das = finetune_mask(net, pipe.final_mask, splits.train, cfg)
            rows = random_skip_baseline(net, splits.train, splits.test, cfg, k=args.random_baseline)
            with open(out / "random_baseline.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["kind", "subset", "accuracy", "loss"])
                das_metrics = evaluate(das, splits.test)
                w.writerow(["das", pipe.final_mask.label(), repr(das_metrics["accuracy"]), repr(das_metrics["loss"])])
                for mask, metrics in rows:
                    w.writerow(["random", mask.label(), repr(metrics["accuracy"]), repr(metrics["loss"])])
            timings["random_baseline"] = time.perf_counter() - t0
        inputs = [Path(args.config), Path(args.checkpoint), Path(args.data)]
        _write_manifest(out, "search", inputs, _arg_dict(args), cfg.seed, started, timings)
    test = report.phases.get("test", {})
    print(f"final mask {report.final_mask}  test accuracy {test.get('accuracy', float('nan')):.4f}  "
          f"FLOPs saved {report.flop_saved_fraction:.2%}")


def cmd_oracle(args) -> None:
    started = time.time()
    net = _load_checkpoint(args.checkpoint)
    if net.n > MAX_ORACLE_N:
        raise ValidationError(
            f"exhaustive oracle supports n <= {MAX_ORACLE_N}, checkpoint has n={net.n}; "
            "use `search --random-baseline K` for a sampled comparison instead"
        )
    if not 0 <= args.skip <= net.n:
        raise ValidationError(f"--skip must lie in [0, {net.n}]")
    splits = _load_splits(args.data)
    out = _out_dir(args.out)
    with _locked(out):
        cfg = SearchConfig(n=net.n, m=args.skip, seed=args.seed)
        result = oracle_best_skip_set(net, splits.train, splits.val, args.skip, budget=args.budget, cfg=cfg, seed=args.seed)
        result.write_csv(out / "oracle.csv")
        _write_manifest(out, "oracle", [Path(args.checkpoint), Path(args.data)], _arg_dict(args), args.seed, started)
    print(f"best subset {result.best.sorted()} (loss {result.losses[0]:.4f}) of {len(result.ranking)}")


def _read_baseline(path: Path) -> tuple[float | None, list[float]]:
    das, rand = None, []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["kind"] == "das":
                das = float(row["accuracy"])
            else:
                rand.append(float(row["accuracy"]))
    return das, rand


def cmd_report(args) -> None:
    runs = [Path(d) for d in args.runs]
    missing = [str(d / "report.json") for d in runs if not (d / "report.json").exists()]
    if missing:
        raise ValidationError("missing report files: " + ", ".join(missing))
    reports = [SearchReport.load(d / "report.json") for d in runs]
    out = _out_dir(args.out)
    by_m: dict[int, list[SearchReport]] = {}
    for rep in reports:
        by_m.setdefault(rep.m, []).append(rep)
    rows = []
    for m in sorted(by_m):
        reps = by_m[m]
        accs = [r.phases.get("test", r.phases.get("val", {})).get("accuracy", float("nan")) for r in reps]
        rows.append({
            "m": m,
            "runs": len(reps),
            "accuracy": float(np.mean(accs)),
            "flop_saved_fraction": float(np.mean([r.flop_saved_fraction for r in reps])),
            "trainable_params": int(np.mean([r.trainable_param_count for r in reps])),
        })
    fields = ["m", "runs", "accuracy", "flop_saved_fraction", "trainable_params"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    lines = ["| " + " | ".join(fields) + " |", "|" + "---|" * len(fields)]
    for r in rows:
        lines.append(f"| {r['m']} | {r['runs']} | {r['accuracy']:.4f} | {r['flop_saved_fraction']:.4f} | {r['trainable_params']} |")
    (out / "summary.md").write_text("\n".join(lines) + "\n")

    baseline_rows = []
    for d, rep in zip(runs, reports):
        path = d / "random_baseline.csv"
        if not path.exists():
            continue
        das, rand = _read_baseline(path)
        baseline_rows.append({
            "run": d.name,
            "seed": rep.config.get("seed"),
            "m": rep.m,
            "das_accuracy": das,
            "random_mean": float(np.mean(rand)),
            "random_std": float(np.std(rand)),
            "random_k": len(rand),
        })
    if baseline_rows:
        with open(out / "das_vs_random.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, list(baseline_rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(baseline_rows)
    print(f"wrote {out / 'summary.csv'} ({len(rows)} rows)")


def cmd_eval(args) -> None:
    splits = _load_splits(args.data)
    data = getattr(splits, args.split)
    try:
        payload = json.loads(Path(args.checkpoint).read_text())
    except FileNotFoundError:
        raise ValidationError(f"checkpoint {args.checkpoint} not found") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint {args.checkpoint}: {exc}") from exc
    if "final_mask" in payload:
        if args.mask:
            raise ValidationError("--mask applies to full checkpoints; a pruned export already fixes its mask")
        model = PrunedNetwork.from_dict(payload)
        metrics = evaluate(model, data)
    else:
        model = SkippableNetwork.from_dict(payload)
        mask = SkipMask([int(v) for v in args.mask.split(",") if v.strip()], model.n) if args.mask else None
        metrics = evaluate(model, data, mask)
    text = json.dumps({"split": args.split, **metrics}, sort_keys=True)
    if args.out:
        out = _out_dir(args.out)
        (out / f"eval_{args.split}.json").write_text(text + "\n")
    print(text)


def _arg_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynskip", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log one line per bandit update")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a planted benchmark (checkpoint + data)")
    p.add_argument("spec", help="PlantedSpec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("search", help="warmup, bandit search and finetune")
    p.add_argument("--config", required=True, help="SearchConfig JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory with train/val/test CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--skip", type=int, help="override m")
    p.add_argument("--candidates", type=int, help="override c")
    p.add_argument("--interval", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--random-baseline", type=int, default=0, metavar="K",
                   help="also finetune K random m-subsets for comparison")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("oracle", help="exhaustive ranking of every m-subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--skip", type=int, required=True)
    p.add_argument("--budget", type=int, default=200, help="finetune steps per subset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="aggregate search runs into tables")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="evaluate a checkpoint or pruned export")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--mask", help="comma-separated skipped blocks (full checkpoints only)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ValidationError, ConfigError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SearchAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
