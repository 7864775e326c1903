"""Command-line entry point wiring the modules into runnable workflows.

Subcommands: init-config, synth, normalize, train, evaluate, report.
Exit codes: 0 success, 1 usage error, 2 data/config error, 3 runtime
failure. All randomness derives from the single seed (--seed overrides the
config's seed).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

# the tensors this tool moves are small; multithreaded BLAS only adds
# overhead (set before numpy loads, harmless if it already has)
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

from concurrent.futures import ProcessPoolExecutor

from . import data as data_mod
from .config import (
    RunConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    render_config,
)
from .errors import (
    ConfigError,
    CorruptCheckpoint,
    DecodeError,
    EmptyInput,
    IoError,
    MissingClass,
    MissingFile,
    MitopatchError,
    ParseError,
    StainEstimationError,
    UnsupportedFormat,
    UsageError,
)
from .metrics import format_table, parse_report, render_report
from .nn import ModelConfig
from .stain import normalize_or_passthrough
from .train import checkpoint_load, checkpoint_save, evaluate, train_loop

_DATA_ERRORS = (
    ConfigError,
    ParseError,
    MissingFile,
    DecodeError,
    UnsupportedFormat,
)
_RUNTIME_ERRORS = (
    CorruptCheckpoint,
    MissingClass,
    EmptyInput,
    IoError,
    StainEstimationError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="mitopatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write the default run config")
    p.add_argument("--out", help="output path (default: stdout)")

    p = sub.add_parser("synth", help="generate a synthetic stained-patch dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--pos-fraction", type=float, help="positive-class fraction")
    p.add_argument("--domains", type=int, help="number of domains")
    p.add_argument("--patch-size", type=int, help="patch side in pixels")
    p.add_argument("--separation", type=float, help="class separability in (0, 1]")
    p.add_argument("--seed", type=int, help="seed override")

    p = sub.add_parser("normalize", help="batch stain normalization over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint/output directory")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--numeric-mode", choices=["reference64", "fast32"])
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="output report JSON path")
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("report", help="pretty-print a report JSON as a text table")
    p.add_argument("--report", required=True, help="report JSON path")
    return parser


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


def _cmd_init_config(args) -> int:
    text = render_config(RunConfig())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_synth(args) -> int:
    cfg = _load_run_config(args.config)
    synth = cfg.data
    overrides = {
        "n_samples": args.n,
        "pos_fraction": args.pos_fraction,
        "n_domains": args.domains,
        "patch_size": args.patch_size,
        "separation": args.separation,
    }
    fields = {
        "n_samples": synth.n_samples,
        "pos_fraction": synth.pos_fraction,
        "n_domains": synth.n_domains,
        "patch_size": synth.patch_size,
        "seed": args.seed if args.seed is not None else cfg.seed,
        "separation": synth.separation,
    }
    for key, value in overrides.items():
        if value is not None:
            fields[key] = value
    try:
        synth_cfg = data_mod.SynthConfig(**fields)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    entries = data_mod.generate_synthetic(synth_cfg, args.out)
    n_pos = sum(e.label for e in entries)
    print(f"wrote {len(entries)} patches ({n_pos} positive) to {args.out}")
    return 0


def _normalize_one(job):
    path, (raw, shape), params = job
    import numpy as np

    patch = np.frombuffer(raw, dtype=np.uint8).reshape(shape)
    normalized, ok = normalize_or_passthrough(patch, params)
    return path, normalized, ok


def _cmd_normalize(args) -> int:
    cfg = _load_run_config(args.config)
    entries = data_mod.load_manifest(args.manifest)
    names = [os.path.basename(e.path) for e in entries]
    if len(set(names)) != len(names):
        clash = next(n for n in names if names.count(n) > 1)
        raise ParseError(
            f"entries share the output name {clash!r}; normalize writes a flat directory"
        )
    os.makedirs(args.out, exist_ok=True)
    passthrough = 0
    jobs = max(1, args.jobs)
    patches = [(e, data_mod.load_patch(e)) for e in entries]
    if jobs == 1:
        results = [
            (e.path, *normalize_or_passthrough(patch, cfg.stain))
            for e, patch in patches
        ]
    else:
        payload = [
            (e.path, (patch.tobytes(), patch.shape), cfg.stain) for e, patch in patches
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_normalize_one, payload))
    rows = []
    for (entry, _), (path, normalized, ok) in zip(patches, results):
        passthrough += not ok
        name = os.path.basename(path)
        data_mod.save_patch(os.path.join(args.out, name), normalized)
        rows.append([name, str(entry.label), str(entry.domain_id)])
    _write_manifest(os.path.join(args.out, data_mod.MANIFEST_NAME), rows)
    print(
        f"normalized {len(results) - passthrough} patches, "
        f"{passthrough} passed through, into {args.out}"
    )
    return 0


def _write_manifest(path: str, rows: list[list[str]]) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(data_mod.MANIFEST_HEADER)
        writer.writerows(rows)


def _cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    numeric_mode = args.numeric_mode or cfg.numeric_mode
    entries = data_mod.load_manifest(args.manifest)
    dataset = data_mod.load_dataset(entries)

    result = train_loop(
        dataset,
        cfg.model,
        cfg.optim,
        cfg.loss,
        cfg.augment,
        cfg.stain,
        seed=seed,
        numeric_mode=numeric_mode,
        threshold=args.threshold,
    )

    os.makedirs(args.out, exist_ok=True)
    best = max(
        (h for h in result.history if h["val"]["bacc"] is not None),
        key=lambda h: h["val"]["bacc"],
        default=None,
    )
    checkpoint_save(
        result.params,
        cfg.model,
        None,
        epoch=best["epoch"] if best else len(result.history),
        best_bacc=best["val"]["bacc"] if best else None,
        path=args.out,
        numeric_mode=numeric_mode,
        seed=seed,
        run_config=config_to_dict(cfg),
    )
    with open(os.path.join(args.out, "history.jsonl"), "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(os.path.join(args.out, "val_report.json"), "w", encoding="utf-8") as fh:
        fh.write(render_report(result.report) + "\n")
    val_rows = [
        [os.path.relpath(entries[i].path, args.out), str(entries[i].label), str(entries[i].domain_id)]
        for i in result.val_indices
    ]
    _write_manifest(os.path.join(args.out, "val_manifest.csv"), val_rows)
    print(
        f"trained {len(result.history)} epochs, best val bacc "
        f"{best['val']['bacc'] if best else 'n/a'} (epoch {best['epoch'] if best else 'n/a'})"
    )
    return 0


def _cmd_evaluate(args) -> int:
    params, header = checkpoint_load(args.checkpoint)
    run_cfg_dict = header.get("run_config")
    cfg = RunConfig() if run_cfg_dict is None else config_from_dict(run_cfg_dict)
    model_cfg = ModelConfig(
        in_channels=header["model"]["in_channels"],
        stem_channels=header["model"]["stem_channels"],
        blocks=tuple(tuple(b) for b in header["model"]["blocks"]),
        transition_compression=header["model"]["transition_compression"],
        input_size=header["model"]["input_size"],
    )
    entries = data_mod.load_manifest(args.manifest)
    dataset = data_mod.load_dataset(entries)
    report = evaluate(
        params,
        model_cfg,
        dataset,
        cfg.augment,
        stain_params=cfg.stain,
        threshold=args.threshold,
    )
    text = render_report(report)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    pooled = report.overall_pooled
    print(
        f"evaluated {len(dataset)} samples: bacc="
        f"{'n/a' if pooled.bacc is None else f'{pooled.bacc:.4f}'}"
    )
    return 0


def _cmd_report(args) -> int:
    if not os.path.exists(args.report):
        raise MissingFile(f"report not found: {args.report}")
    with open(args.report, encoding="utf-8") as fh:
        report = parse_report(fh.read())
    print(format_table(report))
    return 0


_COMMANDS = {
    "init-config": _cmd_init_config,
    "synth": _cmd_synth,
    "normalize": _cmd_normalize,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MitopatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(dispatch())
