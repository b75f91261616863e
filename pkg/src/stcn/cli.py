"""``stcn`` command line: synth, train, extract, eval and the chained pipeline.

Output layout under ``--out``::

    dataset/                    synthetic data (when the config has a synth section)
    backbone/<modality>.ckpt    backbone checkpoints, metrics_<modality>.jsonl
    features/                   cached feature sequences, index.json
    tcn/model.ckpt              TCN checkpoint, metrics.jsonl
    report/accuracy.json        test accuracy
    report/confusion.csv        confusion matrix with class-name header row and column
    report/tse/<sample_id>.json per-level gate vectors

Errors print one line ``stcn-error <kind>: <message>`` to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import RunConfig, load_config
from .data import (
    ARCHETYPES, augment, read_manifest, read_split, stratified_split, synth_gestures, write_dataset,
)
from .errors import ConfigError, InputError, StcnError
from .tcn import dump_temporal_weights
from .train import (
    clips_for, evaluate, extract_features, load_extractor, load_tcn, pretrain_backbone,
    read_feature_cache, save_backbone, save_tcn, train_tcn, write_feature_cache, write_metrics,
)

log = logging.getLogger("stcn")

EXIT_CODES = {"config": 2, "input": 3, "shape": 4, "numeric": 5, "io": 6}


# -- paths ---------------------------------------------------------------------------------


def backbone_path(cfg: RunConfig, modality: str) -> Path:
    return cfg.out_dir / "backbone" / f"{modality}.ckpt"


def features_dir(cfg: RunConfig) -> Path:
    return cfg.out_dir / "features"


def tcn_path(cfg: RunConfig) -> Path:
    return cfg.out_dir / "tcn" / "model.ckpt"


def report_dir(cfg: RunConfig) -> Path:
    return cfg.out_dir / "report"


def _require(path: Path, what: str, hint: str) -> None:
    if not path.exists():
        raise InputError(f"missing {what} at {path}; {hint}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> Path:
    if cfg.synth is None:
        raise InputError("config has no synth section")
    s = cfg.synth
    samples = synth_gestures(s.num_classes, s.samples_per_class, (s.frames, s.height, s.width),
                             seed=cfg.seed, noise=s.noise)
    splits = stratified_split(samples, s.held_out, cfg.seed)
    root = write_dataset(cfg.dataset_dir, samples, splits, ARCHETYPES[:s.num_classes])
    print(f"dataset {root}: {len(samples)} samples, {s.num_classes} classes, "
          f"{len(splits['train'])} train / {len(splits['test'])} test")
    return root


def _train_samples(cfg: RunConfig, num_classes: int):
    """Training split, expanded by the configured augmentation ops."""
    samples = read_split(cfg.dataset_dir, "train")
    spec = cfg.augment_spec(num_classes)
    if spec is None:
        return samples
    return [a for s in samples for a in augment(s, spec)]


def cmd_train_backbone(cfg: RunConfig) -> List[Path]:
    manifest = read_manifest(cfg.dataset_dir)
    samples = _train_samples(cfg, manifest["num_classes"])
    if not samples:
        raise InputError("training split is empty")
    missing = [m for m in cfg.data.modalities if m not in samples[0].frames]
    if missing:
        raise InputError(f"dataset lacks modalities {missing}")
    out = cfg.out_dir / "backbone"
    out.mkdir(parents=True, exist_ok=True)
    labels = [s.label for s in samples]
    written = []
    for m in cfg.data.modalities:
        n, h, w, c = samples[0].frames[m].shape
        bcfg = cfg.backbone_config(h, w, c, manifest["num_classes"])
        model, history = pretrain_backbone(clips_for(samples, m, cfg.data.frames), labels, bcfg, cfg.train_backbone)
        save_backbone(backbone_path(cfg, m), model, m)
        write_metrics(out / f"metrics_{m}.jsonl", history)
        log.info("backbone %s: final train accuracy %.3f", m, history[-1]["accuracy"])
        written.append(backbone_path(cfg, m))
    return written


def cmd_extract(cfg: RunConfig, threads: int = 1) -> Path:
    for m in cfg.data.modalities:
        _require(backbone_path(cfg, m), f"{m} backbone checkpoint", "run `stcn train --stage backbone` first")
    manifest = read_manifest(cfg.dataset_dir)
    extractors = {m: load_extractor(backbone_path(cfg, m)) for m in cfg.data.modalities}
    samples = _train_samples(cfg, manifest["num_classes"]) + read_split(cfg.dataset_dir, "test")
    seqs = extract_features(samples, extractors, cfg.data.seq_len, threads=threads)
    root = write_feature_cache(features_dir(cfg), seqs)
    print(f"features {root}: {len(seqs)} sequences of {seqs[0].length} x {seqs[0].channels}")
    return root


def _cache_ids(cfg: RunConfig, split: str) -> List[str]:
    """Sample ids of a split, including augmented copies present in the cache."""
    index_path = features_dir(cfg) / "index.json"
    if not index_path.is_file():
        raise InputError(f"no feature cache at {features_dir(cfg)}; run extract first")
    cached = json.loads(index_path.read_text())["samples"]
    base = set(read_manifest(cfg.dataset_dir)["splits"][split])
    ids = [sid for sid in cached if sid.split("~", 1)[0] in base]
    absent = base - {sid.split("~", 1)[0] for sid in ids}
    if absent:
        raise InputError(f"feature cache lacks {len(absent)} {split} samples; run extract first")
    return ids


def cmd_train_tcn(cfg: RunConfig) -> Path:
    ids = _cache_ids(cfg, "train")
    manifest = read_manifest(cfg.dataset_dir)
    seqs = read_feature_cache(features_dir(cfg), ids)
    tcfg = cfg.tcn_config(seqs[0].channels, manifest["num_classes"])
    model, history = train_tcn(seqs, tcfg, cfg.train_tcn)
    tcn_path(cfg).parent.mkdir(parents=True, exist_ok=True)
    save_tcn(tcn_path(cfg), model)
    write_metrics(tcn_path(cfg).parent / "metrics.jsonl", history)
    log.info("tcn: final train accuracy %.3f", history[-1]["accuracy"])
    return tcn_path(cfg)


def confusion_csv(confusion, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred"] + list(class_names))
    for name, row in zip(class_names, confusion):
        writer.writerow([name] + [int(v) for v in row])
    return buf.getvalue()


def cmd_eval(cfg: RunConfig) -> Path:
    _require(tcn_path(cfg), "TCN checkpoint", "run `stcn train --stage tcn` first")
    for m in cfg.data.modalities:
        _require(backbone_path(cfg, m), f"{m} backbone checkpoint", "run `stcn train --stage backbone` first")
    manifest = read_manifest(cfg.dataset_dir)
    ids = [sid for sid in _cache_ids(cfg, "test") if "~" not in sid]
    seqs = read_feature_cache(features_dir(cfg), ids)
    model = load_tcn(tcn_path(cfg))
    result = evaluate(model, seqs)
    out = report_dir(cfg)
    (out / "tse").mkdir(parents=True, exist_ok=True)
    _write_json(out / "accuracy.json", {
        "accuracy": result.accuracy,
        "correct": int(result.confusion.trace()),
        "total": int(result.confusion.sum()),
        "split": "test",
        "use_tse": model.cfg.use_tse,
    })
    (out / "confusion.csv").write_text(confusion_csv(result.confusion, manifest["class_names"]))
    chosen = seqs[:cfg.tse_samples]
    if chosen:
        dumps = dump_temporal_weights(np.stack([s.values for s in chosen]), model)
        for seq, levels in zip(chosen, dumps):
            _write_json(out / "tse" / f"{seq.sample_id}.json", {
                "sample_id": seq.sample_id,
                "layers": [{"layer_index": w.layer_index, "s": [float(v) for v in w.s]} for w in levels],
            })
    print(f"test accuracy {result.accuracy:.4f} ({int(result.confusion.trace())}/{int(result.confusion.sum())})")
    return out


def cmd_pipeline(cfg: RunConfig, threads: int = 1) -> Path:
    if cfg.synth is not None:
        cmd_synth(cfg)
    cmd_train_backbone(cfg)
    cmd_extract(cfg, threads)
    cmd_train_tcn(cfg)
    return cmd_eval(cfg)


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stcn", description="Two-stage gesture recognition pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("synth", "generate the synthetic gesture dataset"),
                            ("train", "train one stage"),
                            ("extract", "cache feature sequences from the trained backbones"),
                            ("eval", "evaluate the TCN and write the report"),
                            ("pipeline", "synth, train backbone, extract, train tcn, eval")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for extraction")
        if name == "train":
            p.add_argument("--stage", required=True, choices=("backbone", "tcn"))
    return parser


def _configure_logging() -> None:
    level = os.environ.get("STCN_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG", "WARNING"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging()
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, out=args.out, seed=args.seed)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train_backbone(cfg) if args.stage == "backbone" else cmd_train_tcn(cfg)
        elif args.command == "extract":
            cmd_extract(cfg, args.threads)
        elif args.command == "eval":
            cmd_eval(cfg)
        else:
            cmd_pipeline(cfg, args.threads)
    except StcnError as exc:
        return _fail(exc.kind, str(exc))
    except OSError as exc:
        return _fail("io", str(exc))
    return 0


def _fail(kind: str, message: str) -> int:
    print(f"stcn-error {kind}: {' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES.get(kind, 1)


def main() -> None:
    sys.exit(run())

if __name__ == "__main__":
    main()
