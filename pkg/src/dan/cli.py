"""Command-line entry point: ``dan <command> [flags]``.

Exit codes: 0 success, 2 usage, 3 numeric divergence, 4 I/O.
Settings resolve as flags > ``--config`` JSON > ``DAN_SEED`` (seed only) > preset.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import ModelConfig, OptimizerConfig, data_preset, preset
from .container import ContainerError, write_records
from .synth import (
    GenerationError,
    gen_matching_dataset,
    gen_vqa_dataset,
    make_concept_vocabulary,
    noise_for,
    read_dataset,
    write_dataset,
)
from .train import (
    DivergenceError,
    KindMismatchError,
    Trainer,
    embed_items,
    evaluate_retrieval,
    evaluate_vqa,
    model_config_for,
    model_from_checkpoint,
    predict_vqa,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
OPT_FIELDS = {f.name for f in fields(OptimizerConfig)}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hashes(paths) -> dict:
    return {str(p): sha256_file(p) for p in sorted(set(map(str, paths))) if Path(p).is_file()}


def write_manifest(path, command: str, config: dict, seed, inputs, outputs, started: float) -> Path:
    """One JSON record per command run; hashes cover every input and output file."""
    record = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "hashes": _hashes(list(inputs) + list(outputs)),
        "wall_clock_seconds": time.time() - started,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"--config {path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"--config {path}: expected a JSON object")
    flat = {}
    for key in ("data", "model", "optimizer"):
        if isinstance(raw.get(key), dict):
            flat.update(raw.pop(key))
    flat.update(raw)
    return flat


def _env_seed():
    value = os.environ.get("DAN_SEED")
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"DAN_SEED must be an integer, got {value!r}") from None


def resolve(preset_values: dict, config: dict, flags: dict) -> dict:
    """Layer settings: preset, then DAN_SEED, then the config file, then explicit flags."""
    out = dict(preset_values)
    env = _env_seed()
    if env is not None:
        out["seed"] = env
    out.update({k: v for k, v in config.items() if k in out or k in MODEL_FIELDS | OPT_FIELDS})
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if args.manifest else default


def _load_split(data_dir, split: str):
    ds = read_dataset(data_dir)
    if split not in ds.splits:
        raise UsageError(f"dataset {data_dir} has no {split!r} split")
    return ds, ds.splits[split]


def _find_item(items, item_id: int):
    for it in items:
        if it.item_id == item_id:
            return it
    raise UsageError(f"item id {item_id} not found")


def _load_model(path, kind: str | None = None):
    ckpt = load_checkpoint(path)
    if kind is not None and ckpt.kind != kind:
        raise KindMismatchError(f"checkpoint {path} holds a {ckpt.kind!r} model; this command needs {kind!r}")
    return model_from_checkpoint(ckpt)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    started = time.time()
    flags = {
        "seed": args.seed,
        "concepts": args.concepts,
        "attributes": args.attributes,
        "feature_dim": args.feature_dim,
        "regions": args.regions,
        "scale": args.scale,
        "noise_ratio": args.noise_ratio,
        "train": args.train,
        "val": args.val,
        "test": args.test,
        "caption_min": args.caption_min,
        "caption_max": args.caption_max,
    }
    base = dict(data_preset(args.task), seed=0)
    cfg = resolve(base, _read_config(args.config), flags)
    if args.task == "vqa" and (args.caption_min is not None or args.caption_max is not None):
        raise UsageError("--caption-min/--caption-max apply to --task match only")
    concepts = make_concept_vocabulary(cfg["concepts"], cfg["attributes"], cfg["feature_dim"], cfg["seed"], cfg["scale"])
    sigma = noise_for(concepts, cfg["noise_ratio"])
    sizes = {s: cfg[s] for s in ("train", "val", "test")}
    if args.task == "vqa":
        ds = gen_vqa_dataset(concepts, sizes, cfg["regions"], sigma, cfg["seed"])
    else:
        bounds = (cfg["caption_min"], cfg["caption_max"])
        ds = gen_matching_dataset(concepts, sizes, cfg["regions"], bounds, sigma, cfg["seed"])
    written = write_dataset(ds, args.out)
    counts = {k: len(v) for k, v in ds.splits.items()}
    print(f"wrote {args.task} dataset to {args.out}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    write_manifest(
        _manifest_path(args, Path(args.out) / "run_manifest.json"),
        "gen-data", dict(cfg, task=args.task), cfg["seed"], [], written.values(), started,
    )
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    model_preset, opt_preset = preset(args.preset)
    flags = {
        "steps": args.steps,
        "dim": args.dim,
        "margin": args.margin,
        "learning_rate": args.lr,
        "momentum": args.momentum,
        "weight_decay": args.weight_decay,
        "clip_threshold": args.clip,
        "dropout_rate": args.dropout,
        "epochs": args.epochs,
        "lr_drop_epoch": args.lr_drop_epoch,
        "lr_drop_factor": args.lr_drop_factor,
        "batch_size": args.batch_size,
        "seed": args.seed,
    }
    cfg = resolve({**model_preset, **opt_preset}, _read_config(args.config), flags)
    if args.epochs is not None and args.lr_drop_epoch is None and "lr_drop_epoch" not in _read_config(args.config):
        cfg["lr_drop_epoch"] = min(cfg["lr_drop_epoch"], cfg["epochs"])
    dataset = read_dataset(args.data)
    model_cfg = model_config_for(dataset, args.model, **{k: v for k, v in cfg.items() if k in {"steps", "dim", "margin", "max_len"}})
    opt_cfg = OptimizerConfig.from_dict(cfg)
    out = Path(args.out)
    log_path = out / "train_log.jsonl"
    out.mkdir(parents=True, exist_ok=True)
    log_path.unlink(missing_ok=True)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.kind != args.model:
            raise KindMismatchError(f"checkpoint {args.resume} holds a {ckpt.kind!r} model, not {args.model!r}")
        if ModelConfig.from_dict(ckpt.model) != model_cfg:
            raise KindMismatchError(f"checkpoint {args.resume} was trained with a different model config")
        trainer = Trainer.from_checkpoint(ckpt, opt_cfg)
        trainer.fit(dataset.splits["train"], dataset.splits.get("val", ()), sink=out, log_path=log_path)
    else:
        trainer, _ = train(args.model, dataset, model_cfg, opt_cfg, sink=out, log_path=log_path)
    summary = {"epochs": trainer.epoch, "best_metric": trainer.best_metric}
    print(json.dumps(summary, sort_keys=True))
    outputs = [out / "last.ckpt", out / "best.ckpt", log_path]
    inputs = sorted(Path(args.data).glob("*")) + ([Path(args.resume)] if args.resume else [])
    config = {"model": model_cfg.to_dict(), "optimizer": opt_cfg.to_dict(), "preset": args.preset}
    write_manifest(_manifest_path(args, out / "run_manifest.json"), "train", config, opt_cfg.seed, inputs, outputs, started)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.time()
    model = _load_model(args.checkpoint)
    _, items = _load_split(args.data, args.split)
    if model.config.kind == "rdan":
        result = {"split": args.split, "accuracy": evaluate_vqa(model, items)}
    else:
        result = {"split": args.split, "direction": args.direction}
        result.update(evaluate_retrieval(model, items, args.direction, tuple(args.k)).to_json())
    text = json.dumps(result, sort_keys=True)
    print(text)
    outputs = []
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        outputs.append(args.out)
    default = Path(args.checkpoint).with_suffix(".evaluate.json")
    write_manifest(
        _manifest_path(args, default), "evaluate", vars_config(args), None,
        [args.checkpoint, Path(args.data) / f"{args.split}.dan"], outputs, started,
    )
    return EXIT_OK


def cmd_answer(args) -> int:
    started = time.time()
    model = _load_model(args.checkpoint, "rdan")
    ds, items = _load_split(args.data, args.split)
    item = _find_item(items, args.item_id)
    if args.question is not None:
        try:
            item = type(item)(**{**item.__dict__, "question": ds.vocab.encode(args.question)})
        except KeyError as e:
            raise UsageError(str(e)) from None
    candidates = args.candidates
    preds, probs = predict_vqa(model, [item], candidates)
    answer = int(preds[0])
    print(f"{answer} {ds.concepts.attribute_names[answer]} {float(probs[0][answer])!r}")
    default = Path(args.checkpoint).with_suffix(".answer.json")
    write_manifest(
        _manifest_path(args, default), "answer", vars_config(args), None,
        [args.checkpoint, Path(args.data) / f"{args.split}.dan"], [], started,
    )
    return EXIT_OK


def cmd_embed(args) -> int:
    started = time.time()
    model = _load_model(args.checkpoint, "mdan")
    _, items = _load_split(args.data, args.split)
    z = embed_items(model, items, args.modality)
    records = (({"item_id": it.item_id, "modality": args.modality}, row) for it, row in zip(items, z))
    write_records(args.out, records)
    print(f"wrote {len(items)} {args.modality} embeddings of width {z.shape[1]} to {args.out}")
    write_manifest(
        _manifest_path(args, Path(str(args.out) + ".manifest.json")), "embed", vars_config(args), None,
        [args.checkpoint, Path(args.data) / f"{args.split}.dan"], [args.out], started,
    )
    return EXIT_OK


def retrieve(z_query: np.ndarray, gallery: np.ndarray, gallery_ids, top_k: int):
    """Top-k (id, score) by inner product, ties to the lower id.

    Scores are correctly rounded sums (``math.fsum``) so any offline
    dot-product script using the same summation reproduces them exactly.
    """
    scores = [math.fsum(float(a) * float(b) for a, b in zip(z_query, row)) for row in gallery]
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], gallery_ids[j]))
    return [(gallery_ids[j], scores[j]) for j in order[:top_k]]


def cmd_retrieve(args) -> int:
    started = time.time()
    model = _load_model(args.checkpoint, "mdan")
    _, items = _load_split(args.data, args.split)
    position = {it.item_id: i for i, it in enumerate(items)}
    _find_item(items, args.query_id)
    picked = range(len(items)) if args.gallery is None else [position[_find_item(items, i).item_id] for i in args.gallery]
    gallery = [items[i] for i in picked]
    q_mod, g_mod = ("image", "text") if args.direction == "image2text" else ("text", "image")
    # embed whole splits, batched exactly as the embed command does, so rows match bitwise
    zq = embed_items(model, items, q_mod)[position[args.query_id]]
    zg = embed_items(model, items, g_mod)[list(picked)]
    for rank, (item_id, score) in enumerate(retrieve(zq, zg, [g.item_id for g in gallery], args.top_k), 1):
        print(f"{rank} {item_id} {score!r}")
    default = Path(args.checkpoint).with_suffix(".retrieve.json")
    write_manifest(
        _manifest_path(args, default), "retrieve", vars_config(args), None,
        [args.checkpoint, Path(args.data) / f"{args.split}.dan"], [], started,
    )
    return EXIT_OK


def graymap(weights) -> bytes:
    """A 1-row binary PGM, one pixel per weight, brightness round(255·w/max w)."""
    w = np.asarray(weights, dtype=np.float64)
    top = w.max() if w.size else 0.0
    pixels = np.zeros(w.size, dtype=np.uint8) if top <= 0 else np.rint(255.0 * w / top).astype(np.uint8)
    return f"P5\n{w.size} 1\n255\n".encode("ascii") + pixels.tobytes()


def read_graymap(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    width, height = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)


def cmd_dump_attention(args) -> int:
    started = time.time()
    model = _load_model(args.checkpoint)
    _, items = _load_split(args.data, args.split)
    item = _find_item(items, args.item_id)
    tokens = item.question if model.config.kind == "rdan" else item.caption
    ids, lens = np.array([tokens], dtype=np.int64), np.array([len(tokens)], dtype=np.int64)
    regions = item.scene.regions[None]
    if model.config.kind == "rdan":
        trace = model.forward(regions, ids, lens).trace
    else:
        trace = model.similarity(regions, ids, lens).trace
    steps = []
    for k, (v, u) in enumerate(zip(trace.visual, trace.textual), 1):
        steps.append({"step": k, "visual": [float(x) for x in v[0]], "textual": [float(x) for x in u[0][: lens[0]]]})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "attention.json"]
    written[0].write_text(json.dumps({"item_id": item.item_id, "steps": steps}, indent=1) + "\n", encoding="utf-8")
    for s in steps:
        for modality in ("visual", "textual"):
            p = out / f"step{s['step']}_{modality}.pgm"
            p.write_bytes(graymap(s[modality]))
            written.append(p)
    print(f"wrote {len(written)} files to {out}")
    write_manifest(
        _manifest_path(args, out / "run_manifest.json"), "dump-attention", vars_config(args), None,
        [args.checkpoint, Path(args.data) / f"{args.split}.dan"], written, started,
    )
    return EXIT_OK


def vars_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dan", description="Dual attention networks on synthetic scenes.")
    p.add_argument("--version", action="version", version=f"dan {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        sp.add_argument("--config", help="JSON file of settings (flags override it)")
        if manifest:
            sp.add_argument("--manifest", help="where to write the run manifest")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--task", choices=["vqa", "match"], required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--concepts", type=int)
    g.add_argument("--attributes", type=int)
    g.add_argument("--feature-dim", type=int)
    g.add_argument("--regions", type=int)
    g.add_argument("--scale", type=float, help="prototype norm")
    g.add_argument("--noise-ratio", type=float, help="noise sigma / min prototype separation")
    g.add_argument("--train", type=int)
    g.add_argument("--val", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--caption-min", type=int)
    g.add_argument("--caption-max", type=int)
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--model", choices=["rdan", "mdan"], required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=["toy", "paper"], default="toy")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--steps", type=int)
    t.add_argument("--dim", type=int)
    t.add_argument("--margin", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--clip", type=float)
    t.add_argument("--dropout", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr-drop-epoch", type=int)
    t.add_argument("--lr-drop-factor", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--direction", choices=["image2text", "text2image"], default="image2text")
    e.add_argument("-k", type=int, nargs="+", default=[1, 5, 10])
    e.add_argument("--out")
    common(e)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("answer", help="answer one question with an r-DAN checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--item-id", type=int, required=True)
    a.add_argument("--question", help="replace the stored question text")
    a.add_argument("--candidates", type=int, nargs="+")
    common(a)
    a.set_defaults(func=cmd_answer)

    r = sub.add_parser("retrieve", help="rank a gallery for one query with an m-DAN checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="test")
    r.add_argument("--query-id", type=int, required=True)
    r.add_argument("--direction", choices=["image2text", "text2image"], default="image2text")
    r.add_argument("--gallery", type=int, nargs="+", help="restrict the gallery to these item ids")
    r.add_argument("--top-k", type=int, default=5)
    common(r)
    r.set_defaults(func=cmd_retrieve)

    m = sub.add_parser("embed", help="embed one modality of a split")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--split", default="test")
    m.add_argument("--modality", choices=["image", "text"], required=True)
    m.add_argument("--out", required=True)
    common(m)
    m.set_defaults(func=cmd_embed)

    d = sub.add_parser("dump-attention", help="write attention weights as JSON and graymaps")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="test")
    d.add_argument("--item-id", type=int, required=True)
    d.add_argument("--out", required=True)
    common(d)
    d.set_defaults(func=cmd_dump_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad flags
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"dan: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, KindMismatchError, GenerationError, ValueError, KeyError) as e:
        print(f"dan {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ContainerError) as e:
        print(f"dan {args.command}: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
