"""Command-line front end.

Exit codes: 0 success, 1 configuration error, 2 I/O or file-format error,
3 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli

from moder import __version__
from moder.bench.ablate import Axis, ablate
from moder.bench.metrics import matrix_to_csv
from moder.bench.pipeline import build_experiment, run_pipeline
from moder.config import RunConfig, load_config
from moder.encoder.model import ReferenceEncoder, encode
from moder.encoder.text import ClassPrompt
from moder.errors import ConfigError, ContractError, FormatError, TrainingDivergenceError
from moder.hub import io as hub_io

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE = 0, 1, 2, 3

log = logging.getLogger("moder")


def _write(path: Path, data: str | bytes) -> None:
    """Write through a sibling temp file so a crash never leaves a partial output."""
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data, encoding="utf-8")
    tmp.replace(path)


def _parse_value(text: str):
    """Read an override value with TOML rules, falling back to a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _parse_value(value.strip())
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = str(args.out)
    if getattr(args, "mtil_transfer_inclusive", False):
        overrides["eval.mtil_transfer_inclusive"] = True
    return cfg.with_overrides(overrides) if overrides else cfg


def _setup_logging(verbose: bool, logfile: Path | None = None) -> None:
    log.handlers.clear()
    log.setLevel(logging.DEBUG)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(console)
    if logfile is not None:
        fh = logging.FileHandler(logfile, mode="w", encoding="utf-8")
        fh.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        log.addHandler(fh)


def _config_lock(cfg: RunConfig) -> str:
    return f"# content hash: {cfg.content_hash()}\n# moder {__version__}\n" + cfg.to_toml()


# --- subcommands -------------------------------------------------------------------

def cmd_gen_world(args) -> int:
    cfg = resolve_config(args)
    exp = build_experiment(cfg)
    w = exp.world
    doc = {
        "seed": w.seed,
        "spec": {k: getattr(w.spec, k) for k in ("n_classes", "n_families", "gamma", "delta", "sigma")},
        "encoder_fingerprint": f"{exp.encoder.fingerprint:#018x}",
        "classes": [
            {"id": c, "name": w.names[c], "family": w.families[c], "mean": w.means[c].tolist()}
            for c in range(w.n_classes)
        ],
        "stream": {
            "protocol": exp.stream.protocol.value,
            "tasks": [list(t) for t in exp.stream.tasks],
            "train_per_class": exp.stream.train_per_class,
            "test_per_class": exp.stream.test_per_class,
        },
        "config_hash": cfg.content_hash(),
    }
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write(out, json.dumps(doc, indent=2) + "\n")
    print(f"wrote {out} ({w.n_classes} classes, {exp.stream.n_tasks} tasks)")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    _setup_logging(args.verbose, out / "logs" / "run.log")
    _write(out / "config.lock", _config_lock(cfg))

    exp = build_experiment(cfg)
    result = run_pipeline(cfg, exp, progress=log.info)
    baseline = run_pipeline(cfg.with_overrides({"eval.method": "zero_shot"}), exp).report

    hub_io.save(result.hub, out / "hub.modr")
    _write(out / "accuracy.csv", matrix_to_csv(result.accuracy))
    extra = {
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "version": __version__,
        "zero_shot": {k: v for k, v in baseline.to_dict().items() if k in ("faa", "ci_transfer", "transfer", "avg", "last")},
    }
    _write(out / "metrics.json", result.report.to_json(extra))
    _write(out / "report.md", render_report(cfg, result, baseline))
    _write_logs(out / "logs", result)
    summary = ", ".join(f"{k}={v:.4f}" for k, v in result.report.to_dict().items()
                        if k in ("faa", "ci_transfer", "transfer", "avg", "last"))
    print(f"{out}: {summary}")
    return EXIT_OK


def _write_logs(logdir: Path, result) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "iteration", "expert_batch", "loss"])
    w.writerows((t, it, g, repr(v)) for t, it, g, v in result.expert_log)
    _write(logdir / "expert_loss.csv", buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "final_loss"])
    w.writerows((t, repr(v)) for t, v in enumerate(result.generator_losses))
    _write(logdir / "generator_loss.csv", buf.getvalue())
    lines = [json.dumps({"after_task": t, **rep.to_dict()}) for t, rep in result.merge_reports]
    _write(logdir / "merges.jsonl", "\n".join(lines) + ("\n" if lines else ""))


def render_report(cfg: RunConfig, result, baseline) -> str:
    rep = result.report
    keys = ["faa", "ci_transfer"] if rep.protocol == "class_il" else ["transfer", "avg", "last"]
    ours, base = rep.to_dict(), baseline.to_dict()
    lines = [
        f"# Run report ({rep.protocol}, {rep.n_tasks} tasks, seed {cfg.seed})",
        "",
        f"Config hash `{cfg.content_hash()}`.",
        "",
        "| metric | MoDER | zero-shot |",
        "| --- | --- | --- |",
    ]
    for k in keys:
        a, b = ours.get(k), base.get(k)
        lines.append(f"| {k} | {'n/a' if a is None else f'{100 * a:.2f}'} | {'n/a' if b is None else f'{100 * b:.2f}'} |")
    n = rep.n_tasks
    lines += ["", "Accuracy matrix (row: after task t, column: task i):", ""]
    lines.append("| t | " + " | ".join(f"task {i}" for i in range(n)) + " |")
    lines.append("| --- |" + " --- |" * n)
    for t, row in enumerate(result.accuracy):
        lines.append(f"| {t} | " + " | ".join(f"{100 * v:.1f}" for v in row) + " |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _setup_logging(args.verbose)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    table = ablate(cfg, args.axis, values, include_zero_shot=not args.no_zero_shot, progress=log.info)
    md = table.to_markdown()
    _write(out / f"ablation_{table.axis.value}.md", md)
    rows = [{"label": r.label, "config_hash": r.config_hash, "base_hash": r.base_hash, **r.report.to_dict()}
            for r in table.rows]
    _write(out / f"ablation_{table.axis.value}.json", json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print(md, end="")
    return EXIT_OK


def _hub_encoder(args) -> ReferenceEncoder | None:
    if getattr(args, "config", None) is None:
        return None
    return ReferenceEncoder(load_config(args.config).encoder_spec)


def cmd_hub_inspect(args) -> int:
    data = Path(args.path).read_bytes()
    hub = hub_io.loads(data, _hub_encoder(args))
    print(f"hub {args.path}: {len(hub)} entries, variant {hub.variant.value}, rank {hub.rank}, seed {hub.seed}")
    print(f"encoder fingerprint {hub.encoder_fingerprint:#018x}, spec {hub.encoder_spec}")
    print(f"{'id':>4}  {'task':>4}  {'params':>7}  name")
    for cid, e in hub.entries.items():
        size = sum(v.size for v in e.adapter.params.values())
        print(f"{cid:>4}  {e.task_id:>4}  {size:>7}  {e.name}")
    return EXIT_OK


def cmd_hub_verify(args) -> int:
    data = Path(args.path).read_bytes()
    hub = hub_io.loads(data, None)
    encoder = _hub_encoder(args) or ReferenceEncoder(hub.encoder_spec)
    if encoder.fingerprint != hub.encoder_fingerprint:
        raise FormatError(
            f"encoder fingerprint mismatch: file has {hub.encoder_fingerprint:#018x}, "
            f"encoder has {encoder.fingerprint:#018x}"
        )
    for cid, e in hub.entries.items():
        z = encode(encoder, ClassPrompt(cid, e.name))
        if np.max(np.abs(z - e.zero_shot)) > 1e-6:
            raise FormatError(f"entry {cid}: cached zero-shot embedding does not match the encoder")
    print(f"OK {args.path}: {len(hub)} entries, fingerprint {hub.encoder_fingerprint:#018x}")
    return EXIT_OK


# --- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moder", description="Class experts, replay and expert forging on synthetic worlds.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_flag=True):
        sp.add_argument("--config", "-c", help="TOML config file (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="master seed (overrides MODER_SEED and the file)")
        sp.add_argument("--threads", type=int, help="cap on worker threads")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. forge.alpha=0.3")
        if out_flag:
            sp.add_argument("--out", "-o", help="output directory")
        sp.add_argument("--verbose", "-v", action="store_true")

    sp = sub.add_parser("gen-world", help="write the synthetic world and task stream as JSON")
    common(sp, out_flag=False)
    sp.add_argument("output", help="output JSON path")
    sp.set_defaults(func=cmd_gen_world)

    sp = sub.add_parser("run", help="train and evaluate; writes hub, metrics and report")
    common(sp)
    sp.add_argument("--mtil-transfer-inclusive", action="store_true",
                    help="sum TR^i over rows 1..i (printed formula) instead of rows before i")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("ablate", help="one run per value along an axis; writes a markdown table")
    common(sp)
    sp.add_argument("--axis", required=True, choices=[a.value for a in Axis])
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--no-zero-shot", action="store_true", help="omit the zero-shot reference row")
    sp.set_defaults(func=cmd_ablate)

    hub = sub.add_parser("hub", help="inspect or verify a hub file")
    hsub = hub.add_subparsers(dest="hub_command", required=True)
    for name, func, text in (("inspect", cmd_hub_inspect, "list entries"),
                             ("verify", cmd_hub_verify, "check integrity and encoder fingerprint")):
        hp = hsub.add_parser(name, help=text)
        hp.add_argument("path")
        hp.add_argument("--config", "-c", help="config whose encoder the hub must match")
        hp.set_defaults(func=func)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
