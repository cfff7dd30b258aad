"""Command line entry point: ``hoiwsod <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import annotations as ann
from .config import ConfigError, PipelineConfig, config_from_dict, load_config, parse_override
from .metrics import iou
from .pipeline import ABLATION_AXES, Pipeline, PipelineError, metric_row, run_ablation
from .pseudolabel import pseudo_boxes

log = logging.getLogger("hoiwsod")


def _common(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--config", required=required, help="YAML config file")
    p.add_argument("--seed", type=int, required=required)
    p.add_argument("--out", required=required, help="run directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set epochs.source=4 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoiwsod", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="render the synthetic world to --out")
    _common(p)

    for name, text in (("train-source", "joint detector + attention training on source classes"),
                       ("pseudolabel", "pseudo boxes for target tuples from the source checkpoint"),
                       ("train-target", "weak (and supervised control) target detectors"),
                       ("eval", "recall and mAP of a finished run; writes report.json")):
        _common(sub.add_parser(name, help=text))

    _common(sub.add_parser("run", help="all phases end to end"), required=True)

    p = sub.add_parser("ablate", help="run a grid of pipeline variants")
    _common(p)
    p.add_argument("--grid", action="append", default=[], metavar="AXIS=V1,V2",
                   help=f"axis values; axes: {', '.join(sorted(ABLATION_AXES))}")

    p = sub.add_parser("plot", help="attention overlays and loss curves for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--side", choices=("source", "target"), default="target")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("-n", type=int, default=12, help="number of tuples to draw")
    return parser


def _config(args, require=("seed", "out")) -> PipelineConfig:
    overrides = dict(parse_override(s) for s in args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    return load_config(args.config, overrides).validate(require)


def _pipeline(args) -> Pipeline:
    cfg = _config(args)
    pipe = Pipeline(cfg)
    pipe.out.mkdir(parents=True, exist_ok=True)
    (pipe.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    pipe.load_data()
    pipe.restore()
    return pipe


def _csv(rows: Sequence[dict], path: Optional[Path] = None) -> str:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if path is not None:
        path.write_text(buf.getvalue())
    return buf.getvalue()


def _finish(pipe: Pipeline, metrics: dict) -> dict:
    from .plots import loss_curves

    report = pipe.report(metrics)
    row = metric_row(metrics)
    sys.stdout.write(_csv([row], pipe.out / "metrics.csv"))
    loss_curves(report["traces"], pipe.out / "plots" / "loss_curves.png")
    return report


def cmd_gen_synth(args) -> None:
    cfg = _config(args, require=("out",))
    if cfg.data.synth is None:
        raise ConfigError("gen-synth needs a 'data.synth' section, not annotation files")
    cfg.data.dir = cfg.out
    cfg.seed = cfg.seed or 0
    root = Pipeline(cfg).generate_synth()
    print(root)


def cmd_train_source(args) -> None:
    pipe = _pipeline(args)
    pipe.train_source()
    print(pipe.source_checkpoint())


def cmd_pseudolabel(args) -> None:
    pipe = _pipeline(args)
    pipe.pseudolabel()
    print(json.dumps(pipe.pseudo_report, sort_keys=True))


def cmd_train_target(args) -> None:
    pipe = _pipeline(args)
    pipe.train_target()
    print(json.dumps({k: v for k, v in pipe.hashes.items() if k != "source"}, sort_keys=True))


def cmd_eval(args) -> None:
    pipe = _pipeline(args)
    _finish(pipe, pipe.evaluate())


def cmd_run(args) -> None:
    pipe = _pipeline(args)
    pipe.train_source()
    pipe.pseudolabel()
    pipe.train_target()
    _finish(pipe, pipe.evaluate())


def parse_grid(items: Sequence[str]) -> dict[str, list]:
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} must look like axis=v1,v2")
        axis, values = item.split("=", 1)
        grid[axis.strip()] = [yaml.safe_load(v) for v in values.split(",") if v.strip()]
    return grid


def cmd_ablate(args) -> None:
    from .plots import ablation_chart

    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(cfg, parse_grid(args.grid), out)
    ann.write_json_atomic(out / "ablation.json", {"rows": rows})
    sys.stdout.write(_csv(rows, out / "ablation.csv"))
    ablation_chart(rows, out / "ablation.png")


def cmd_plot(args) -> None:
    from .plots import attention_overlays, loss_curves

    run = Path(args.run_dir)
    cfg_path = run / "config.json"
    if not cfg_path.is_file():
        raise FileNotFoundError(f"{cfg_path} not found; is {run} a run directory?")
    pipe = Pipeline(config_from_dict(json.loads(cfg_path.read_text()), {"out": str(run)}))
    pipe.load_data()
    det, rrpn = pipe.load_source()
    records = pipe.side(pipe.train if args.split == "train" else pipe.test, args.side)
    records = sorted(records, key=lambda r: r.image_id)[:args.n]
    maps = pipe.tuple_maps(records, rrpn, det.backbone)
    boxes = pseudo_boxes(records, maps, pipe.cfg.delta, pipe.cfg.box_policy)
    panels, rows = [], []
    for rec in records:
        for j, t in enumerate(rec.tuples):
            pb = boxes[(rec.image_id, j)]
            overlap = iou(pb.box, t.object_box) if pb is not None and t.object_box is not None else 0.0
            panels.append({"image": pipe.images.raw(rec), "attention": maps[(rec.image_id, j)],
                           "truth": _scaled(t.object_box, rec, pipe.cfg.image_size),
                           "pseudo": _scaled(pb.box if pb else None, rec, pipe.cfg.image_size),
                           "title": f"{rec.image_id} {t.verb} {t.object_class} IoU={overlap:.2f}"})
            rows.append({"image_id": rec.image_id, "tuple": j, "verb": t.verb,
                         "object_class": t.object_class, "iou": round(overlap, 4),
                         "max_attention": round(float(maps[(rec.image_id, j)].max()), 4)})
    if not panels:
        raise ValueError(f"no {args.side}-class tuples in the {args.split} split")
    plots = run / "plots"
    attention_overlays(panels, plots / f"attention_{args.side}_{args.split}.png")
    report = run / "report.json"
    if report.is_file():
        loss_curves(json.loads(report.read_text()).get("traces", {}), plots / "loss_curves.png")
    sys.stdout.write(_csv(rows, plots / f"attention_{args.side}_{args.split}.csv"))


def _scaled(box, rec, size):
    """Box in the resized image the panels show."""
    if box is None:
        return None
    sx, sy = size / rec.width, size / rec.height
    return ann.BoundingBox(box.x_min * sx, box.y_min * sy, box.x_max * sx, box.y_max * sy)


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train-source": cmd_train_source,
    "pseudolabel": cmd_pseudolabel,
    "train-target": cmd_train_target,
    "eval": cmd_eval,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, PipelineError, FileNotFoundError, ann.AnnotationError, ValueError) as exc:
        print(f"hoiwsod {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
