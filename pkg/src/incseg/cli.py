"""Command-line surface: synth, split, train, eval, pseudo-dump, plot.

Every run persists its fully resolved configuration; re-running a command
with the same config and seed reproduces its outputs bit for bit.  The
``INCSEG_OUT`` environment variable, when set, roots all relative output
directories.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np
import torch

from . import pamr as pamr_mod
from .config import parse_kv_text, render_kv, resolve_config, train_config_from
from .data import load_records, read_manifest, write_manifest
from .errors import (
    ConfigError,
    DataError,
    IncsegError,
    NumericInputError,
    ParseError,
    ShapeError,
    UnsupportedError,
)
from .metrics import parse_report_kv, render_report, render_report_kv
from .models import ModelBundle
from .plotting import ensure_dir, plot_alpha_sweep, plot_loss_curves, \
    plot_per_class_iou, write_summary
from .pooling import softmax_normalize
from .priors import area_downsample
from .pseudo import compose_supervision, hard_labels, smooth_labels, \
    upsample_scores, write_soft_grid
from .schedule import build_schedule, export_schedule, import_schedule
from .synth import save_mask_png, synth_dataset, write_dataset
from .trainer import evaluate, format_log, load_checkpoint, load_config, \
    parse_log, train_base, train_step
from .data import filter_step

OUT_ROOT_ENV = "INCSEG_OUT"
ALPHA_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def resolve_out(path: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit with code 1
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="incseg",
                     description="weakly-supervised incremental segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--max-shapes", type=int, default=3)

    p = sub.add_parser("split", help="build per-step manifests from a dense dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="custom",
                   choices=["voc-15-5", "voc-10-10", "coco-to-voc", "custom"])
    p.add_argument("--steps", help="custom steps, e.g. '1,2,3;4,5'")
    p.add_argument("--protocol", default="overlap", choices=["disjoint", "overlap"])
    p.add_argument("--base-prefilter", action="store_true",
                   help="drop base-step images containing future classes")

    p = sub.add_parser("train", help="run a base or incremental training step")
    p.add_argument("--config", help="key-value config document")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--alpha-sweep", action="store_true",
                   help="repeat the run over alpha in {0, 0.25, 0.5, 0.75, 1}")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dense manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--schedule", required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--out", help="directory for metrics.txt / metrics.kv")

    p = sub.add_parser("pseudo-dump", help="export pseudo-supervision for inspection")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=8)

    p = sub.add_parser("plot", help="render charts from logs and reports")
    p.add_argument("--out", required=True)
    p.add_argument("--log", action="append", default=[])
    p.add_argument("--report", action="append", default=[])
    return parser


def cmd_synth(args) -> int:
    out = ensure_dir(resolve_out(args.out))
    samples = synth_dataset(args.n_images, args.classes, seed=args.seed,
                            image_size=args.image_size, max_shapes=args.max_shapes)
    manifest = write_dataset(out, samples)
    print(f"wrote {len(samples)} images under {out} (manifest: {manifest})")
    return EXIT_OK


def _parse_steps(text: str):
    try:
        return [[int(c) for c in group.split(",") if c] for group in text.split(";")]
    except ValueError as exc:
        raise ConfigError(f"bad --steps value {text!r}: {exc}") from exc


def cmd_split(args) -> int:
    if args.preset == "custom":
        if not args.steps:
            raise ConfigError("--steps is required with --preset custom")
        schedule = build_schedule("custom", custom_steps=_parse_steps(args.steps))
    else:
        if args.steps:
            raise ConfigError("--steps only applies to --preset custom")
        schedule = build_schedule(args.preset)
    out = ensure_dir(resolve_out(args.out))
    with open(os.path.join(out, "schedule.txt"), "w") as fh:
        fh.write(export_schedule(schedule))
    records = load_records(args.manifest, load_images=False, load_masks=True)
    originals = {r.image_path: r.dense_mask for r in records}
    for t in range(schedule.num_steps):
        kept = filter_step(records, schedule, t, args.protocol,
                           base_prefilter=args.base_prefilter)
        if t > 0:
            kept = [replace(r, mask_path=None) for r in kept]
        else:
            # persist background-shift remapped masks so the manifest stays
            # the single source of truth for the training payload
            for i, r in enumerate(kept):
                if np.array_equal(r.dense_mask, originals[r.image_path]):
                    continue
                mask_dir = ensure_dir(os.path.join(out, "step_0_masks"))
                path = os.path.join(mask_dir, os.path.basename(r.mask_path))
                save_mask_png(path, r.dense_mask, schedule.ignore_id)
                kept[i] = replace(r, mask_path=path)
        path = os.path.join(out, f"step_{t}_train.txt")
        write_manifest(path, [replace(r, image=None, dense_mask=None) for r in kept])
        print(f"step {t}: {len(kept)} records -> {path}")
    return EXIT_OK


def _run_one_training(run: dict) -> dict:
    """Execute one resolved config; returns the metric report dict."""
    schedule = import_schedule(open(run["schedule_file"]).read())
    cfg = train_config_from(run)
    t = run["step"]
    out_dir = ensure_dir(resolve_out(os.path.join(run["out"], f"step_{t}")))

    records = load_records(run["train_manifest"])
    if t == 0:
        bundle, rows = train_base(records, schedule, cfg, out_dir=out_dir)
    else:
        prev_path = run["prev_checkpoint"] or os.path.join(
            resolve_out(run["out"]), f"step_{t - 1}", "checkpoint.pt")
        prev = load_checkpoint(prev_path)
        bundle, rows = train_step(records, schedule, t, cfg, prev, out_dir=out_dir)

    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(render_kv(run))

    report = None
    if run["val_manifest"]:
        val = load_records(run["val_manifest"])
        report = evaluate(bundle, val, schedule, t)
        _write_report(out_dir, report, schedule, extra={
            "alpha": cfg.alpha, "protocol": run["protocol"], "step": t,
            "prior": cfg.prior,
        })
    print(f"step {t}: trained {cfg.epochs} epochs on {len(records)} records "
          f"-> {out_dir}")
    if report is not None:
        print(f"  mIoU all={report['all']:.4f} old={report['old']:.4f} "
              f"new={report['new']:.4f}")
    return {"out_dir": out_dir, "report": report}


def _write_report(out_dir: str, report: dict, schedule, extra: dict | None = None) -> None:
    ids = report["class_ids"]
    names = [schedule.name_of(c) for c in ids]
    kv = render_report_kv(report, class_ids=ids)
    if extra:
        kv += "".join(f"{k} = {v}\n" for k, v in sorted(extra.items()))
    with open(os.path.join(out_dir, "metrics.kv"), "w") as fh:
        fh.write(kv)
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        fh.write(render_report(report, names))


def cmd_train(args) -> int:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    file_text = open(args.config).read() if args.config else None
    run = resolve_config(file_text, overrides,
                         source=args.config or "<cli>")
    if not run["schedule_file"]:
        raise ConfigError("config needs schedule_file")
    if not run["train_manifest"]:
        raise ConfigError("config needs train_manifest")

    if not args.alpha_sweep:
        _run_one_training(run)
        return EXIT_OK

    base_out = run["out"]
    entries = []
    for alpha in ALPHA_SWEEP:
        sweep_run = dict(run)
        sweep_run["alpha"] = alpha
        sweep_run["out"] = os.path.join(base_out, f"alpha_{alpha:g}")
        result = _run_one_training(sweep_run)
        if result["report"] is not None:
            entries.append((alpha, run["protocol"], result["report"]["all"]))
    if entries:
        sweep_dir = ensure_dir(resolve_out(base_out))
        plot_alpha_sweep(entries, os.path.join(sweep_dir, "alpha_sweep.png"))
        write_summary([f"alpha={a:g} protocol={p} miou_all={v:.4f}"
                       for a, p, v in entries],
                      os.path.join(sweep_dir, "alpha_sweep.txt"))
    return EXIT_OK


def cmd_eval(args) -> int:
    schedule = import_schedule(open(args.schedule).read())
    bundle = load_checkpoint(args.checkpoint, with_localizer=False)
    records = load_records(args.manifest)
    report = evaluate(bundle, records, schedule, args.step)
    names = [schedule.name_of(c) for c in report["class_ids"]]
    print(render_report(report, names))
    if args.out:
        out = ensure_dir(resolve_out(args.out))
        _write_report(out, report, schedule, extra={"step": args.step})
    return EXIT_OK


def cmd_pseudo_dump(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    if bundle.localizer is None or bundle.old_snapshot is None:
        raise DataError("pseudo-dump needs an incremental-step checkpoint "
                        "(localizer and previous model included)")
    cfg = load_config(args.checkpoint)
    out = ensure_dir(resolve_out(args.out))
    records = load_records(args.manifest, load_masks=False)[: args.limit]
    bundle.eval()
    for i, record in enumerate(records):
        x = torch.from_numpy(record.image).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            feats = bundle.features(x)
            z = bundle.scores(x, features=feats)
            m = softmax_normalize(z)
            old_logits = bundle.old_snapshot.logits(x)
            m_up = upsample_scores(m, x.shape[-2:])
            q = smooth_labels(hard_labels(m_up), m_up, cfg.alpha)
            q_hat = compose_supervision(q, torch.sigmoid(old_logits))
        grid = q_hat[0].numpy().astype(np.float32)
        write_soft_grid(os.path.join(out, f"qhat_{i:04d}.grid"), grid)
        argmax = np.asarray(bundle.class_ids, dtype=np.uint8)[grid.argmax(axis=0)]
        save_mask_png(os.path.join(out, f"qhat_{i:04d}.png"), argmax)
    print(f"dumped pseudo-supervision for {len(records)} images to {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    if not args.log and not args.report:
        raise ConfigError("plot needs at least one --log or --report")
    out = ensure_dir(resolve_out(args.out))
    summary = []
    for i, log_path in enumerate(args.log):
        rows = parse_log(open(log_path).read())
        dest = os.path.join(out, f"loss_curves_{i}.png")
        plot_loss_curves(rows, dest)
        summary.append(f"log {log_path}: {len(rows)} iterations -> {dest}")
    sweep_entries = []
    for i, report_path in enumerate(args.report):
        report = parse_report_kv(open(report_path).read())
        dest = os.path.join(out, f"per_class_iou_{i}.png")
        plot_per_class_iou(report, dest)
        summary.append(f"report {report_path}: miou_all="
                       f"{report.get('miou.all', float('nan')):.4f} -> {dest}")
        if "alpha" in report:
            proto = report.get("protocol", "unknown")
            sweep_entries.append((report["alpha"], proto, report["miou.all"]))
    if len(sweep_entries) >= 2:
        plot_alpha_sweep(sweep_entries, os.path.join(out, "alpha_sweep.png"))
        summary.append(f"alpha sweep with {len(sweep_entries)} points")
    write_summary(summary, os.path.join(out, "summary.txt"))
    print("\n".join(summary))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "pseudo-dump": cmd_pseudo_dump,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (ConfigError, UnsupportedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericInputError, ShapeError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IncsegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
