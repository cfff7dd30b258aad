"""Two-phase pipeline: source training, pseudo-labelling, target training, evaluation."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import shutil
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from PIL import Image

from . import annotations as ann
from .checkpoint import load_manifest, load_state, save_checkpoint
from .config import PipelineConfig, config_from_dict
from .detector import (Detector, batch_targets, detect_records, detection_loss,
                       make_optimizer, record_targets, train_detector)
from .features import Backbone, EmbeddingTable, Featurizer, kinds_label
from .metrics import mean_average_precision, recall_pairs, tuple_recall
from .pseudolabel import generate_pseudo_annotations, predict_attention, pseudo_boxes
from .rrpn import Rrpn, gaussian_target, train_rrpn_step
from .synthworld import default_scene_spec, generate_dataset, synth_embeddings

log = logging.getLogger(__name__)

PHASES = ("data", "source", "pseudo", "target", "eval")


class PipelineError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"phase {phase!r} failed: {type(cause).__name__}: {cause}")
        self.phase = phase


def _digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def source_key(cfg: PipelineConfig) -> str:
    """Hash of every setting that influences the source-phase checkpoint."""
    d = cfg.to_dict()
    keep = ("seed", "data", "image_size", "grid_size", "image_channels", "rrpn_widths",
            "pose_sigma_cells", "lambda", "split", "optim")
    sub = {k: d[k] for k in keep}
    sub["data"] = {k: v for k, v in sub["data"].items() if k != "dir"}
    sub["features"] = sorted(cfg.active)
    sub["epochs"] = d["epochs"]["source"]
    return _digest(sub)


class ImageCache:
    """Loads records' images once, resized to the backbone input size."""

    def __init__(self, size: int):
        self.size = size
        self._cache: dict[str, torch.Tensor] = {}
        self.roots: dict[str, Path] = {}

    def register(self, records, root: Path) -> None:
        for r in records:
            self.roots[r.image_id] = root

    def path(self, rec: ann.ImageRecord) -> Path:
        path = Path(rec.image_path)
        if not path.is_absolute():
            path = self.roots.get(rec.image_id, Path(".")) / path
        return path.resolve()

    def raw(self, rec: ann.ImageRecord) -> np.ndarray:
        with Image.open(self.path(rec)) as im:
            im = im.convert("RGB")
            if im.size != (self.size, self.size):
                im = im.resize((self.size, self.size), Image.BILINEAR)
            return np.asarray(im)

    def __call__(self, rec: ann.ImageRecord) -> torch.Tensor:
        key = rec.image_id
        if key not in self._cache:
            arr = self.raw(rec)
            self._cache[key] = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
        return self._cache[key].float() / 255.0 - 0.5


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg.validate(require=("seed", "out"))
        self.out = Path(cfg.out)
        self.images = ImageCache(cfg.image_size)
        self.timing: dict[str, float] = {}
        self.traces: dict[str, list] = {}
        self.hashes: dict[str, str] = {}
        self.train: list[ann.ImageRecord] = []
        self.test: list[ann.ImageRecord] = []
        self.split: Optional[ann.SplitSpec] = None
        self.table: Optional[EmbeddingTable] = None
        self.pseudo_report: Optional[dict] = None

    # ------------------------------------------------------------------
    # helpers

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        log.info("phase %s: start", name)
        try:
            yield
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        finally:
            self.timing[name] = round(time.perf_counter() - t0, 3)
        log.info("phase %s: done in %.1fs", name, self.timing[name])

    @property
    def featurizer(self) -> Featurizer:
        cfg = self.cfg
        sigma = cfg.pose_sigma_cells * cfg.image_size / cfg.grid_size
        return Featurizer(self.table, cfg.image_size, cfg.grid_size, cfg.active,
                          cfg.image_channels, sigma)

    def side(self, records, side: str) -> list[ann.ImageRecord]:
        return ann.restrict(records, self.split.classes(side))

    # ------------------------------------------------------------------
    # phase 0: data

    def synth_dir(self) -> Path:
        return Path(self.cfg.data.dir) if self.cfg.data.dir else self.out / "data"

    def generate_synth(self) -> Path:
        cfg, syn = self.cfg, self.cfg.data.synth
        root = self.synth_dir()
        manifest = {"synth": cfg.to_dict()["data"]["synth"], "image_size": cfg.image_size,
                    "seed": cfg.seed}
        mpath = root / "synth.json"
        if mpath.is_file() and json.loads(mpath.read_text()) == manifest:
            log.info("reusing synthetic data in %s", root)
            return root
        for name, n_src, n_tgt, phase, prefix in (
            ("train", syn.n_source_train, syn.n_target_train, "synth_train", "tr"),
            ("test", syn.n_source_test, syn.n_target_test, "synth_test", "te"),
        ):
            spec = default_scene_spec(n_src, n_tgt, syn.n_target_classes, cfg.image_size,
                                      cfg.phase_seed(phase), prefix)
            spec.max_distractors = syn.max_distractors
            generate_dataset(spec, root / name)
        synth_embeddings().save(root / "embeddings.txt")
        ann.write_json_atomic(mpath, manifest)
        return root

    def load_data(self) -> None:
        with self.phase("data"):
            cfg = self.cfg
            if cfg.data.synth is not None:
                root = self.generate_synth()
                train_path, test_path = root / "train/annotations.json", root / "test/annotations.json"
                emb_path = root / "embeddings.txt"
            else:
                train_path, test_path = Path(cfg.data.train), Path(cfg.data.test)
                emb_path = Path(cfg.data.embeddings)
            self.train = ann.filter_no_interaction(ann.load_dataset(train_path))
            self.test = ann.filter_no_interaction(ann.load_dataset(test_path))
            self.images.register(self.train, train_path.parent)
            self.images.register(self.test, test_path.parent)
            self.table = EmbeddingTable.load(emb_path)
            if cfg.split.target_classes:
                classes = set(ann.class_frequencies(self.train))
                target = frozenset(cfg.split.target_classes)
                self.split = ann.SplitSpec(frozenset(classes - target), target,
                                           frozenset(t.verb for r in self.train for t in r.tuples))
            else:
                self.split = ann.split_by_frequency(self.train, cfg.split.n_target)
            ann.save_split(self.split, self.out / "split.json")

    # ------------------------------------------------------------------
    # phase 1: joint detector + RRPN training on source classes

    def build_source_models(self) -> tuple[Detector, Rrpn]:
        cfg = self.cfg
        torch.manual_seed(cfg.phase_seed("source"))
        backbone = Backbone(cfg.image_channels)
        det = Detector(backbone, sorted(self.split.source_classes))
        rrpn = Rrpn(self.featurizer.in_channels, cfg.rrpn_widths)
        return det, rrpn

    def source_checkpoint(self) -> Path:
        return self.out / "source" / "checkpoint.pt"

    def train_source(self) -> None:
        with self.phase("source"):
            cfg = self.cfg
            dest = self.source_checkpoint()
            key = source_key(cfg)
            cached = Path(cfg.cache_dir) / f"source-{key}" / "checkpoint.pt" if cfg.cache_dir else None
            if cached is not None and cached.is_file():
                log.info("reusing cached source checkpoint %s", cached)
                dest.parent.mkdir(parents=True, exist_ok=True)
                for suffix in ("", ".json"):
                    shutil.copyfile(str(cached) + suffix, str(dest) + suffix)
                self.traces["source"] = load_manifest(dest).get("trace", [])
                self.hashes["source"] = load_manifest(dest)["sha256"]
                return
            det, rrpn = self.build_source_models()
            trace = self._fit_source(det, rrpn)
            self.traces["source"] = trace
            manifest = save_checkpoint(
                dest, {"backbone": det.backbone, "detector_head": det.head, "rrpn": rrpn},
                grid_size=cfg.grid_size, image_size=cfg.image_size,
                active=sorted(cfg.active), features=kinds_label(cfg.active), lam=cfg.lam,
                seed=cfg.seed, classes=det.classes, image_channels=cfg.image_channels,
                rrpn_widths=list(cfg.rrpn_widths), in_channels=rrpn.in_channels,
                source_key=key, trace=trace,
            )
            self.hashes["source"] = manifest["sha256"]
            if cached is not None:
                cached.parent.mkdir(parents=True, exist_ok=True)
                for suffix in ("", ".json"):
                    shutil.copyfile(str(dest) + suffix, str(cached) + suffix)

    def _fit_source(self, det: Detector, rrpn: Rrpn) -> list[dict]:
        cfg = self.cfg
        fz = self.featurizer
        grid = (cfg.grid_size, cfg.grid_size)
        entries = list(ann.enumerate_tuples(self.train, self.split, "source"))
        if not entries:
            raise ValueError("no source tuples to train on")
        source_cls = self.split.source_classes
        det_targets, poses, verbs, att_targets, dims = [], [], [], [], []
        for rec, _, t in entries:
            kept = ann.ImageRecord(rec.image_id, rec.image_path, rec.width, rec.height,
                                   tuple(u for u in rec.tuples if u.object_class in source_cls))
            det_targets.append(record_targets(kept, det))
            d = (rec.height, rec.width)
            dims.append(d)
            poses.append(fz.pose(t, d))
            verbs.append(fz.verb(t.verb))
            att_targets.append(torch.from_numpy(gaussian_target(t.object_box, d, grid)).float())
        params = list(det.parameters()) + list(rrpn.parameters())
        opt = make_optimizer(params, cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay)
        rng = np.random.default_rng(cfg.phase_seed("source"))
        bs = cfg.optim.batch_size
        trace = []
        for epoch in range(cfg.epochs.source):
            det.train()
            rrpn.train()
            sums = np.zeros(3)
            order = rng.permutation(len(entries))
            for start in range(0, len(entries), bs):
                idx = order[start:start + bs]
                images = torch.stack([self.images(entries[i][0]) for i in idx])
                feats = det.backbone(images)
                cls_logits, deltas = det.head(feats)
                cls_t, off_t = batch_targets(det, [det_targets[i] for i in idx], grid,
                                             [dims[i] for i in idx])
                l_cls, l_loc = detection_loss(cls_logits, deltas, cls_t, off_t)
                volume = fz.volume(feats, torch.stack([poses[i] for i in idx]),
                                   torch.stack([verbs[i] for i in idx]))
                l_att = train_rrpn_step(rrpn, opt, volume, torch.stack([att_targets[i] for i in idx]),
                                        cfg.lam, det_loss=l_cls + l_loc)
                sums += np.array([l_cls.item(), l_loc.item(), l_att]) * len(idx)
            mean = sums / len(entries)
            trace.append({"epoch": epoch, "l_cls": float(mean[0]), "l_loc": float(mean[1]),
                          "l_att": float(mean[2])})
            log.info("source epoch %d: l_cls=%.4f l_loc=%.4f l_att=%.4f", epoch, *mean)
        det.eval()
        rrpn.eval()
        return trace

    def load_source(self) -> tuple[Detector, Rrpn]:
        path = self.source_checkpoint()
        manifest = load_manifest(path)
        if manifest["grid_size"] != self.cfg.grid_size:
            raise ValueError(
                f"checkpoint grid {manifest['grid_size']} != configured grid {self.cfg.grid_size}"
            )
        state = load_state(path)
        backbone = Backbone(manifest["image_channels"])
        det = Detector(backbone, manifest["classes"])
        rrpn = Rrpn(manifest["in_channels"], manifest["rrpn_widths"])
        backbone.load_state_dict(state["backbone"])
        det.head.load_state_dict(state["detector_head"])
        rrpn.load_state_dict(state["rrpn"])
        self.hashes["source"] = manifest["sha256"]
        det.eval()
        rrpn.eval()
        return det, rrpn

    # ------------------------------------------------------------------
    # phase 2: pseudo boxes for target tuples

    def pseudolabel(self) -> list[ann.ImageRecord]:
        with self.phase("pseudo"):
            det, rrpn = self.load_source()
            unlabeled = ann.strip_boxes(self.side(self.train, "target"))
            records, report = generate_pseudo_annotations(
                unlabeled, det.backbone, rrpn, self.featurizer, self.images,
                self.cfg.delta, self.cfg.box_policy)
            records = [ann.ImageRecord(r.image_id, str(self.images.path(r)), r.width, r.height, r.tuples)
                       for r in records]
            ann.save_dataset(records, self.out / "pseudo" / "annotations.json")
            self.pseudo_report = {**report.to_json(), "source_checkpoint": self.hashes["source"]}
            ann.write_json_atomic(self.out / "pseudo" / "report.json", self.pseudo_report)
            return records

    # ------------------------------------------------------------------
    # phase 3: target detectors

    def _train_target(self, records, name: str, seed_phase: str) -> None:
        cfg = self.cfg
        det, _ = self.load_source()
        trace: list = []
        target = train_detector(
            records, sorted(self.split.target_classes), self.images, grid_size=cfg.grid_size,
            epochs=cfg.epochs.target, lr=cfg.optim.lr, momentum=cfg.optim.momentum,
            weight_decay=cfg.optim.weight_decay, batch_size=cfg.optim.batch_size,
            backbone=det.backbone, freeze_backbone=cfg.freeze_backbone,
            seed=cfg.phase_seed(seed_phase), trace=trace)
        self.traces[name] = trace
        manifest = save_checkpoint(
            self.out / name / "checkpoint.pt",
            {"backbone": target.backbone, "detector_head": target.head},
            grid_size=cfg.grid_size, image_size=cfg.image_size, classes=target.classes,
            image_channels=cfg.image_channels, seed=cfg.seed,
            source_checkpoint=self.hashes["source"], trace=trace)
        self.hashes[name] = manifest["sha256"]

    def train_target(self) -> None:
        with self.phase("target"):
            pseudo = ann.load_dataset(self.out / "pseudo" / "annotations.json")
            if not pseudo:
                raise ValueError("pseudo-labelling produced no boxes; nothing to train on")
            self._train_target(pseudo, "target_weak", "target")
            if self.cfg.supervised_control:
                self._train_target(self.side(self.train, "target"), "target_supervised", "supervised")

    def load_detector(self, name: str) -> Detector:
        path = self.out / name / "checkpoint.pt"
        manifest = load_manifest(path)
        state = load_state(path)
        det = Detector(Backbone(manifest["image_channels"]), manifest["classes"])
        det.backbone.load_state_dict(state["backbone"])
        det.head.load_state_dict(state["detector_head"])
        self.hashes[name] = manifest["sha256"]
        det.eval()
        return det

    # ------------------------------------------------------------------
    # phase 4: evaluation

    def tuple_maps(self, records, rrpn: Rrpn, backbone: Backbone) -> dict:
        return predict_attention(records, backbone, rrpn, self.featurizer, self.images)

    def recall(self, records, rrpn, backbone, delta=None, policy=None) -> float:
        maps = self.tuple_maps(records, rrpn, backbone)
        boxes = pseudo_boxes(records, maps, self.cfg.delta if delta is None else delta,
                             policy or self.cfg.box_policy)
        return tuple_recall(recall_pairs(records, boxes), 0.5)

    def evaluate(self) -> dict:
        with self.phase("eval"):
            cfg = self.cfg
            det, rrpn = self.load_source()
            src_test = self.side(self.test, "source")
            tgt_train = self.side(self.train, "target")
            tgt_test = self.side(self.test, "target")
            recall = {
                "source_test": self.recall(src_test, rrpn, det.backbone),
                "target_train": self.recall(tgt_train, rrpn, det.backbone),
                "target_test": self.recall(tgt_test, rrpn, det.backbone),
            }
            maps = {}
            runs = [("source", det, src_test), ("target_weak", self.load_detector("target_weak"), tgt_test)]
            if cfg.supervised_control:
                runs.append(("target_supervised", self.load_detector("target_supervised"), tgt_test))
            for name, model, records in runs:
                dets = detect_records(records, model, self.images, cfg.score_threshold, cfg.nms_iou)
                dump = self.out / "detections" / f"{name}.jsonl"
                dump.parent.mkdir(parents=True, exist_ok=True)
                with open(dump, "w") as fh:
                    for d in dets:
                        fh.write(json.dumps(d.to_json(), sort_keys=True) + "\n")
                maps[name] = mean_average_precision(dets, records, 0.5,
                                                    classes=model.classes).to_json()
            metrics = {"recall_at_05": recall, "map_at_05": maps}
            ann.write_json_atomic(self.out / "metrics.json", metrics)
            return metrics

    # ------------------------------------------------------------------

    def restore(self) -> None:
        """Pick up hashes, traces and the pseudo report left by earlier invocations."""
        report = self.out / "pseudo" / "report.json"
        if report.is_file():
            self.pseudo_report = json.loads(report.read_text())
        for name in ("source", "target_weak", "target_supervised"):
            path = self.out / name / "checkpoint.pt"
            if Path(str(path) + ".json").is_file():
                manifest = load_manifest(path)
                self.hashes[name] = manifest["sha256"]
                self.traces[name] = manifest.get("trace", [])

    def report(self, metrics: dict) -> dict:
        report = {
            "config": self.cfg.to_dict(),
            "checkpoints": dict(sorted(self.hashes.items())),
            "metrics": metrics,
            "pseudo": self.pseudo_report,
            "timing": self.timing,
            "traces": self.traces,
        }
        ann.write_json_atomic(self.out / "report.json", report)
        return report

    def run(self) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1, sort_keys=True))
        self.load_data()
        self.train_source()
        self.pseudolabel()
        self.train_target()
        metrics = self.evaluate()
        return self.report(metrics)


def run_pipeline(cfg: PipelineConfig) -> dict:
    return Pipeline(cfg).run()


# --------------------------------------------------------------------------
# ablation grids

ABLATION_AXES = {
    "features": "features",
    "lambda": "lambda",
    "delta": "delta",
    "n_target": "split.n_target",
    "freeze_backbone": "freeze_backbone",
    "box_policy": "box_policy",
}


def metric_row(metrics: dict) -> dict:
    row = {f"recall_{k}": v for k, v in metrics["recall_at_05"].items()}
    for name, ap in metrics["map_at_05"].items():
        row[f"map_{name}"] = ap["mAP"]
    return row


def run_ablation(cfg: PipelineConfig, grid: dict[str, list], out: Optional[str | Path] = None) -> list[dict]:
    """Run the pipeline on every cell of ``grid``; failed cells are recorded, not fatal.

    Cells share synthetic data and, through ``cache_dir``, any source-phase
    checkpoint whose settings coincide (e.g. cells differing only in delta).
    """
    unknown = set(grid) - set(ABLATION_AXES)
    if unknown:
        raise ValueError(f"unsupported ablation axes {sorted(unknown)}; choose from {sorted(ABLATION_AXES)}")
    out = Path(out or cfg.out)
    base = cfg.to_dict()
    base["data"]["dir"] = base["data"]["dir"] or str(out / "data")
    base["cache_dir"] = base["cache_dir"] or str(out / "cache")
    axes = sorted(grid)
    rows = []
    for values in itertools.product(*(grid[a] for a in axes)) if axes else [()]:
        cell = dict(zip(axes, values))
        name = "__".join(f"{a}={v}" for a, v in cell.items()) or "baseline"
        overrides = {ABLATION_AXES[a]: v for a, v in cell.items()}
        cell_cfg = config_from_dict({**base, "out": str(out / "cells" / name)}, overrides)
        row: dict[str, Any] = {"cell": name, **{a: str(v) for a, v in cell.items()}}
        try:
            report = run_pipeline(cell_cfg)
            row.update(metric_row(report["metrics"]))
            row["status"] = "ok"
        except Exception as exc:  # keep going; the failure is part of the table
            log.error("ablation cell %s failed: %s", name, exc)
            row["status"] = f"failed: {exc}"
        rows.append(row)
    return rows
