"""``racnet`` command line: data generation, training, evaluation, anchors, unification, ablation.

Every failure ends with one JSON line on stderr, ``{"error": kind, "message": ...}``,
and a distinct exit code: 2 usage / unknown command, 3 invalid config,
4 missing artifact, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import fcntl
import io
import json
import logging
import os
import statistics
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional


from . import anchors as anc
from .config import RunConfig, load_run_config, parse_k_range
from .errors import ConfigError, DataError, RacnetError
from .metrics import compute_metrics
from .nnet import RacnetModel, load_model, predict_batch, save_model, train
from .unify import (
    build_unified_model,
    classify_unified_batch,
    extract_head_latents,
    load_bundle,
    save_bundle,
    train_head,
)
from .volume import generate_synthetic_dataset, read_dataset, split_dataset, write_dataset, write_manifest

log = logging.getLogger("racnet")

COMMANDS = ("gen-data", "train", "eval", "extract-anchors", "classify", "unify", "ablate", "report")
EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_OTHER = 2, 3, 4, 1
ABLATIONS = {
    "full": {},
    "no-mask": {"mask": False},
    "no-alignment": {"routing": "first-l"},
}


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="racnet", description=__doc__.splitlines()[0])
    p.add_argument("command", help=" | ".join(COMMANDS))
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--routing", choices=("aligned", "first-l", "none"))
    p.add_argument("--mask", choices=("on", "off"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="racnet_out", help="output directory (default: %(default)s)")
    p.add_argument("--k-range", dest="k_range", help="k values to try, e.g. 2..25")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


# --- helpers ------------------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _write_text(path, buf.getvalue())


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_history(path: Path, history) -> None:
    _write_csv(path, ["epoch", "loss", "accuracy"],
               [[r["epoch"], _fmt(r["loss"]), _fmt(r["accuracy"])] for r in history])


PRED_HEADER = ["id", "truth", "prediction", "anchor_id", "distance", "confidence"]


def write_predictions(path: Path, rows) -> None:
    _write_csv(path, PRED_HEADER, [[_fmt(v) for v in r] for r in rows])


def write_metrics(out: Path, stem: str, truth, pred) -> dict:
    report = compute_metrics(pred, truth)
    _write_json(out / f"{stem}.json", report.to_json())
    _write_text(out / f"{stem}.txt", report.to_text())
    return report.to_json()


def _require(*paths: Path) -> None:
    for p in paths:
        if not p.exists():
            raise MissingArtifact(f"required artifact not found: {p}")


@contextmanager
def _out_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    path = out / ".racnet.lock"
    fd = os.open(path, os.O_CREAT | os.O_RDWR, 0o644)
    try:
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise RacnetError(f"another racnet command holds {path}") from None
        yield
    finally:
        os.close(fd)
        try:
            path.unlink()
        except FileNotFoundError:
            pass


class Paths:
    def __init__(self, cfg: RunConfig, out: Path):
        self.out = out
        self.data = Path(cfg.data) if cfg.data else out / "data"
        self.data_b = Path(cfg.data_b) if cfg.data_b else None
        self.model = Path(cfg.model) if cfg.model else out / "model.racn"
        self.anchors = Path(cfg.anchors) if cfg.anchors else out / "anchors.json"
        self.bundle = Path(cfg.bundle) if cfg.bundle else None

    def split(self, name: str, data: Optional[Path] = None) -> Path:
        data = data or self.data
        return data / ("manifest.jsonl" if name == "all" else f"{name}.jsonl")


def _labels(ds) -> list[int]:
    labels = ds.labels
    if any(x is None for x in labels):
        raise DataError("dataset has unlabelled volumes")
    return labels


# --- commands ----------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, paths: Paths) -> dict:
    ds = generate_synthetic_dataset(cfg.synthetic(), cfg.seed, name=cfg.dataset_name)
    write_dataset(ds, paths.data)
    parts = split_dataset(ds, cfg.fractions(), cfg.seed)
    for name, part in zip(("train", "val", "test"), parts):
        write_manifest(part, paths.split(name))
    meta = {
        "name": ds.name,
        "seed": cfg.seed,
        "class_counts": {str(k): v for k, v in ds.class_counts.items()},
        "splits": {name: len(p) for name, p in zip(("train", "val", "test"), parts)},
        "synthetic": ds.meta["synthetic"],
    }
    _write_json(paths.data / "dataset.json", meta)
    return {"volumes": len(ds), "data": str(paths.data)}


def _train_one(cfg: RunConfig, train_ds, **overrides):
    model = RacnetModel(cfg.model_config(**overrides))
    seed = overrides.get("seed", cfg.seed)
    return train(model, train_ds, cfg.epochs, batch_size=cfg.batch_size, seed=seed, lr=cfg.lr)


def cmd_train(cfg: RunConfig, paths: Paths) -> dict:
    _require(paths.split("train"))
    train_ds = read_dataset(paths.split("train"))
    model, history = _train_one(cfg, train_ds)
    save_model(model, paths.model)
    write_history(paths.out / "history.csv", history)
    return {"model": str(paths.model), "final": history[-1] if history else None}


def _softmax_eval(model, ds):
    probs = predict_batch(model, ds.volumes)["probs"]
    return [int(p) for p in probs.argmax(axis=1)]


def cmd_eval(cfg: RunConfig, paths: Paths) -> dict:
    _require(paths.model, paths.split(cfg.split))
    model = load_model(paths.model)
    ds = read_dataset(paths.split(cfg.split))
    truth = _labels(ds)
    pred = _softmax_eval(model, ds)
    write_predictions(paths.out / "eval_predictions.csv",
                      [(v.id, y, p, None, None, None) for v, y, p in zip(ds.volumes, truth, pred)])
    return write_metrics(paths.out, "eval_metrics", truth, pred)


def cmd_extract_anchors(cfg: RunConfig, paths: Paths) -> dict:
    _require(paths.model, paths.split("train"))
    ks = cfg.k_values()
    if ks:
        _require(paths.split("val"))
    model = load_model(paths.model)
    train_ds = read_dataset(paths.split("train"))
    latents = anc.extract_latents(model, train_ds)
    prov = {"dataset": cfg.dataset_name}
    if ks:
        ks = [k for k in ks if k <= len(latents)]
        sel = anc.select_k(model, latents, read_dataset(paths.split("val")), ks, cfg.kmeans(), prov)
        aset = sel.best
        _write_json(paths.out / "k_selection.json",
                    {"best_k": sel.best_k, "accuracy": {str(k): v for k, v in sel.accuracy.items()}})
    else:
        aset = anc.anchors_from_latents(latents, cfg.kmeans(), prov)
    anc.save_anchor_set(aset, paths.anchors)
    return {"anchors": str(paths.anchors), "k": len(aset),
            "positive": sum(a.label for a in aset.anchors)}


def cmd_classify(cfg: RunConfig, paths: Paths) -> dict:
    _require(paths.split(cfg.split))
    if paths.bundle is not None:
        _require(paths.bundle)
        u = load_bundle(paths.bundle)
        ds = read_dataset(paths.split(cfg.split))
        results = classify_unified_batch(u, ds.volumes)
    else:
        _require(paths.model, paths.anchors)
        model = load_model(paths.model)
        aset = anc.load_anchor_set(paths.anchors)
        ds = read_dataset(paths.split(cfg.split))
        results = anc.classify_nearest_batch(aset, anc.extract_latents(model, ds).vectors) if len(ds) else []
    truth = _labels(ds)
    pred = [r.label for r in results]
    write_predictions(paths.out / "classify_predictions.csv",
                      [(v.id, y, r.label, r.anchor_id, r.distance, r.confidence)
                       for v, y, r in zip(ds.volumes, truth, results)])
    return write_metrics(paths.out, "classify_metrics", truth, pred)


def cmd_unify(cfg: RunConfig, paths: Paths) -> dict:
    if paths.data_b is None:
        raise ConfigError("unify needs data_b (the second dataset directory)")
    _require(paths.model, paths.anchors, paths.split("train", paths.data_b))
    base = load_model(paths.model)
    aset_a = anc.load_anchor_set(paths.anchors)
    train_b = read_dataset(paths.split("train", paths.data_b))
    head, history = train_head(base, train_b, cfg.head_epochs, seed=cfg.seed, batch_size=cfg.batch_size, lr=cfg.lr)
    lat_b = extract_head_latents(base, head, train_b)
    ks = cfg.k_values()
    val_b = None
    if ks:
        _require(paths.split("val", paths.data_b))
        val_b = extract_head_latents(base, head, read_dataset(paths.split("val", paths.data_b)))
    u = build_unified_model(base, head, aset_a, lat_b, cfg.kmeans(cfg.k_b), val_b, ks,
                            name_b=read_json_name(paths.data_b) or "B")
    bundle = paths.bundle or paths.out / "bundle"
    save_bundle(u, bundle)
    write_history(paths.out / "head_history.csv", history)
    return {"bundle": str(bundle), **u.info, "merged": len(u.merged)}


def read_json_name(data_dir: Path) -> Optional[str]:
    meta = data_dir / "dataset.json"
    if meta.exists():
        return json.loads(meta.read_text()).get("name")
    return None


def cmd_ablate(cfg: RunConfig, paths: Paths) -> dict:
    _require(paths.split("train"), paths.split(cfg.split))
    train_ds = read_dataset(paths.split("train"))
    test_ds = read_dataset(paths.split(cfg.split))
    truth = _labels(test_ds)
    seeds = [cfg.seed + i for i in range(cfg.ablate_seeds)]
    results: dict[str, dict] = {}
    for variant, overrides in ABLATIONS.items():
        per_seed = {}
        for seed in seeds:
            model, history = _train_one(cfg, train_ds, seed=seed, **overrides)
            pred = _softmax_eval(model, test_ds)
            d = paths.out / "ablate" / variant / f"seed{seed}"
            write_history(d / "history.csv", history)
            write_predictions(d / "predictions.csv",
                              [(v.id, y, p, None, None, None) for v, y, p in zip(test_ds.volumes, truth, pred)])
            per_seed[seed] = write_metrics(d, "metrics", truth, pred)
        accs = [m["accuracy"] for m in per_seed.values()]
        f1s = [m["macro_f1"] for m in per_seed.values()]
        results[variant] = {
            "accuracy": {str(s): m["accuracy"] for s, m in per_seed.items()},
            "macro_f1": {str(s): m["macro_f1"] for s, m in per_seed.items()},
            "median_accuracy": statistics.median(accs),
            "median_macro_f1": statistics.median(f1s),
        }
    _write_json(paths.out / "ablate" / "ablation.json", {"seeds": seeds, "variants": results})
    lines = [f"{'variant':<14}{'median acc':>12}{'median F1 %':>13}"]
    for variant, r in results.items():
        lines.append(f"{variant:<14}{r['median_accuracy']:>12.4f}{100 * r['median_macro_f1']:>13.2f}")
    _write_text(paths.out / "ablate" / "ablation.txt", "\n".join(lines) + "\n")
    return {v: r["median_accuracy"] for v, r in results.items()}


def cmd_report(cfg: RunConfig, paths: Paths) -> dict:
    if not cfg.predictions:
        raise ConfigError("report needs predictions (a predictions CSV)")
    manifest = Path(cfg.manifest) if cfg.manifest else paths.split(cfg.split)
    pred_path = Path(cfg.predictions)
    _require(pred_path, manifest)
    truth_by_id = {}
    for line in manifest.read_text().splitlines():
        if line.strip():
            row = json.loads(line)
            truth_by_id[row["id"]] = row["label"]
    truth, pred = [], []
    with pred_path.open(newline="") as f:
        for row in csv.DictReader(f):
            if row["id"] not in truth_by_id:
                raise DataError(f"prediction for {row['id']!r} has no manifest entry")
            truth.append(int(truth_by_id[row["id"]]))
            pred.append(int(row["prediction"]))
    return write_metrics(paths.out, "report_metrics", truth, pred)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "extract-anchors": cmd_extract_anchors,
    "classify": cmd_classify,
    "unify": cmd_unify,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command not in HANDLERS:
            raise UsageError(f"unknown command {args.command!r}; expected one of {', '.join(COMMANDS)}")
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for key in ("seed", "routing", "epochs", "k_range"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.mask is not None:
        overrides["mask"] = args.mask
    try:
        if args.config and not Path(args.config).exists():
            raise MissingArtifact(f"config file not found: {args.config}")
        cfg = load_run_config(args.config, overrides)
        if args.k_range:
            parse_k_range(args.k_range)
        out = Path(args.out)
        with _out_lock(out):
            summary = HANDLERS[args.command](cfg, Paths(cfg, out))
    except ConfigError as e:
        return _fail("config", str(e), EXIT_CONFIG)
    except MissingArtifact as e:
        return _fail("missing-artifact", str(e), EXIT_MISSING)
    except (RacnetError, OSError, ValueError, KeyError) as e:
        return _fail(type(e).__name__, str(e), EXIT_OTHER)
    print(json.dumps({"command": args.command, **summary}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
