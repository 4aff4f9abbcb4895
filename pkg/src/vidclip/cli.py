"""Command-line front end: ``python -m vidclip <command> ...``.

Exit codes: 0 success, 2 configuration or validation error, 3 checkpoint /
vocabulary incompatibility, 4 integrity failure (corrupt file or digest).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .embeddings import EmbeddingDump, save_dump
from .encoders import DualEncoder
from .errors import ConfigError, DataError, IntegrityError, VidClipError, VocabError
from .prompting import attach_prompts
from .protocols import (
    SINGLE_VIEW,
    EvalReport,
    SplitSpec,
    append_result,
    check_vocabulary,
    predict,
    read_results,
    resolve_split,
    run_protocol,
    sample_k_shot,
)
from .trainer import checkpoint_digest, load_checkpoint, save_checkpoint, train
from .videogen import default_output_root, digest, load_manifest, load_split, manifest_bytes, save_dataset

log = logging.getLogger("vidclip")

EXIT_OK, EXIT_CONFIG, EXIT_COMPAT, EXIT_INTEGRITY = 0, 2, 3, 4


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _fresh_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"{path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _stamp(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.digest(), "seed": cfg.train.seed, **extra}


def _print_table(header, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(r, widths)) for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    text = "\n".join(lines)
    print(text)
    return text


# --- gen-data --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    manifest = cfg.data.manifest()
    out = Path(args.out) if args.out else default_output_root() / "data" / cfg.digest()
    save_dataset(manifest, out, force=args.force)
    _write_json(out / "run.json", _stamp(cfg, command="gen-data", manifest_sha256=digest(manifest_bytes(manifest))))
    print(f"wrote {len(manifest.classes)} classes to {out}")
    return EXIT_OK


# --- make-splits -----------------------------------------------------------------------

def cmd_make_splits(args) -> int:
    source = load_manifest(args.dataset)
    target = load_manifest(args.target) if args.target else None
    spec = SplitSpec(args.setting, shots=args.k, seed=args.seed)
    spec = resolve_split(spec, source, target)
    multi = args.setting in ("few_shot", "base_to_novel")
    out = Path(args.out) if args.out else Path(args.dataset) / "splits" / f"{args.setting}_k{args.k}_s{args.seed}"
    _fresh_dir(out, args.force)
    rows = []
    for s in ((1, 2, 3) if multi else (1,)):
        split = SplitSpec.from_dict({**spec.to_dict(), "split_index": s})
        selection = None
        if multi:
            classes = split.base_classes if args.setting == "base_to_novel" else split.source_classes
            selection = sample_k_shot(source, args.k, args.seed, s, classes)
        record = {"spec": split.to_dict(), "selection": {str(k): v for k, v in (selection or {}).items()} or None,
                  "dataset": str(args.dataset), "manifest_sha256": digest(manifest_bytes(source))}
        _write_json(out / f"split_{s}.json", record)
        rows.append([s, len(split.source_classes), len(split.target_classes), len(split.base_classes),
                     len(split.novel_classes), args.k if multi else "-"])
    _print_table(["split", "|Y_S|", "|Y_T|", "|Y_B|", "|Y_N|", "K"], rows)
    return EXIT_OK


def _read_split(path) -> tuple[SplitSpec, dict | None]:
    record = json.loads(Path(path).read_text())
    sel = record.get("selection")
    return SplitSpec.from_dict(record["spec"]), ({int(k): v for k, v in sel.items()} if sel else None)


# --- train -----------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    selection = None
    if args.split:
        spec, selection = _read_split(args.split)
    data = load_split(args.dataset, "train", selection)
    stage1 = args.stage1 or cfg.train.stage1_checkpoint
    if cfg.train.regime == "prompt_only":
        if not stage1:
            raise ConfigError("train.regime prompt_only needs --stage1 (a stage-1 checkpoint)")
        base = load_checkpoint(stage1)
        base.provenance.setdefault("stage1", {"checkpoint": str(stage1), "digest": checkpoint_digest(stage1)})
        model = attach_prompts(base, cfg.prompts, cfg.train.seed) if base.prompt is None else base
        model.provenance = base.provenance
    else:
        vocab = cfg.vocabulary()
        model = DualEncoder(cfg.model.model_config(len(vocab)), vocab)
    check_vocabulary(model, [data.manifest.spec(c).name for c in data.class_ids])
    out = Path(args.out) if args.out else default_output_root() / "train" / cfg.digest()
    _fresh_dir(out, args.force)
    result = train(cfg.train, model, data)
    model.provenance["config_hash"] = cfg.digest()
    ckpt = save_checkpoint(model, out / "checkpoint.ckpt")
    _write_json(out / "losses.json", _stamp(cfg, regime=cfg.train.regime, losses=result.losses,
                                            loss_sums=result.loss_sums))
    _write_json(out / "config.json", cfg.to_dict())
    print(f"trained {cfg.train.regime} for {cfg.train.epochs} epochs, final loss {result.final_loss:.4f}")
    print(f"checkpoint {ckpt} ({checkpoint_digest(ckpt)})")
    return EXIT_OK


# --- eval ------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    source = load_manifest(args.dataset)
    target = load_manifest(args.target) if args.target else None
    if args.split:
        spec, _ = _read_split(args.split)
    else:
        spec = SplitSpec(cfg.protocol.setting, shots=cfg.protocol.shots, seed=cfg.protocol.seed)
    label = args.label or _regime_label(model)
    report = run_protocol(spec, model, source, target, views=cfg.protocol.view_set(),
                          fusion=cfg.protocol.fusion, label=label)
    report.config_hash = cfg.digest()
    report.checkpoint_hash = checkpoint_digest(args.checkpoint)
    report.seed = cfg.protocol.seed
    out = Path(args.out) if args.out else default_output_root() / "eval"
    path = append_result(out / "results.jsonl", report)
    _print_table(["label", "setting", "top1", "top5", "H", "C", "V"],
                 [[label, report.setting, f"{report.top1:.2f}", f"{report.top5:.2f}", f"{report.homogeneity:.4f}",
                   f"{report.completeness:.4f}", f"{report.v_measure:.4f}"]])
    print(f"appended to {path}")
    return EXIT_OK


def _regime_label(model) -> str:
    runs = model.provenance.get("runs") or []
    return runs[-1]["regime"] if runs else "frozen"


# --- export-embeddings -----------------------------------------------------------------

def cmd_export(args) -> int:
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    data = load_split(args.dataset, args.split)
    manifest = data.manifest
    class_ids = manifest.class_ids
    check_vocabulary(model, manifest.class_names)
    views = cfg.protocol.views or SINGLE_VIEW
    _, emb, _ = predict(model, data, class_ids, views, cfg.protocol.fusion)
    video_ids = [int(v.rsplit("_", 1)[1]) for v in data.video_ids]
    dump = EmbeddingDump(video_ids, data.labels, emb.astype(np.float32),
                         {c.class_id: c.name for c in manifest.classes},
                         checkpoint_digest(args.checkpoint), cfg.digest(), cfg.protocol.seed)
    out = Path(args.out) if args.out else default_output_root() / "embeddings" / f"{dump.checkpoint_hash}.emb"
    save_dump(dump, out)
    print(f"wrote {len(video_ids)} x {dump.dim} embeddings to {out}")
    return EXIT_OK


# --- report ----------------------------------------------------------------------------

def _collect(paths, pattern):
    found = []
    for p in map(Path, paths):
        found.extend(sorted(p.rglob(pattern)) if p.is_dir() else [p] if p.name.endswith(pattern.lstrip("*")) else [])
    return found


def report_rows(reports: list[EvalReport]) -> list[list]:
    """Method x metric rows, best harmonic mean (then top-1) first."""
    def key(r):
        return (-(r.hm if r.hm is not None else -1.0), -r.top1, r.label or "")

    rows = []
    for r in sorted(reports, key=key):
        fmt = lambda x: "-" if x is None else f"{x:.2f}"  # noqa: E731
        rows.append([r.label or "?", r.setting, fmt(r.base_acc), fmt(r.novel_acc), fmt(r.hm), fmt(r.top1),
                     fmt(r.top5), f"{r.v_measure:.4f}", r.shots if r.shots is not None else "-",
                     r.config_hash or "-"])
    return rows


REPORT_HEADER = ["method", "setting", "base", "novel", "HM", "top1", "top5", "V", "K", "config"]


def cmd_report(args) -> int:
    reports = [r for path in _collect(args.results, "*.jsonl") for r in read_results(path)]
    if not reports:
        raise DataError("no result records found")
    out = Path(args.out) if args.out else default_output_root() / "report"
    out.mkdir(parents=True, exist_ok=True)
    text = _print_table(REPORT_HEADER, report_rows(reports))
    (out / "report.txt").write_text(text + "\n")
    _plot(reports, _collect(args.results, "losses.json"), out)
    print(f"report written to {out}")
    return EXIT_OK


def _plot(reports, loss_files, out: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if loss_files:
        fig, ax = plt.subplots(figsize=(6, 4))
        for f in loss_files:
            rec = json.loads(f.read_text())
            ax.plot(rec["losses"], label=f"{rec.get('regime', '?')} {rec['config_hash'][:8]}")
        ax.set_xlabel("step")
        ax.set_ylabel("batch loss")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "loss_curves.png", dpi=100)
        plt.close(fig)
    shot_reports = [r for r in reports if r.shots is not None]
    if shot_reports:
        fig, ax = plt.subplots(figsize=(6, 4))
        for label in sorted({r.label or "?" for r in shot_reports}):
            pts = sorted((r.shots, r.top1) for r in shot_reports if (r.label or "?") == label)
            ax.plot([k for k, _ in pts], [a for _, a in pts], marker="o", label=label)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("shots K")
        ax.set_ylabel("top-1 (%)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "accuracy_vs_k.png", dpi=100)
        plt.close(fig)


# --- entry point -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vidclip", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("make-splits", help="write split files for one protocol setting")
    p.add_argument("--dataset", required=True)
    p.add_argument("--setting", required=True, choices=["zero_shot", "base_to_novel", "few_shot", "fully_supervised"])
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", help="target dataset directory (zero_shot)")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_splits)

    p = sub.add_parser("train", help="train a checkpoint")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", help="split file restricting the training samples")
    p.add_argument("--stage1", help="stage-1 checkpoint (prompt_only regime)")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and append an EvalReport")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--target")
    p.add_argument("--split")
    p.add_argument("--label")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="dump pooled video embeddings")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("report", help="tabulate results files and plot curves")
    p.add_argument("results", nargs="+", help="results files or directories to search")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except VocabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ConfigError, DataError, FileExistsError, FileNotFoundError, VidClipError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
