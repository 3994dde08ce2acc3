"""``evact`` command line: gen, slice, render, stats, train, eval, retrieve.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .crue import CrueModel, LossConfig
from .errors import EvactError, TrainingDiverged, ValidationError
from .events import ON, generate_scene, read_stream, write_stream
from .representation import (PRESETS, AfeConfig, afe_slice, fixed_count_slice, fixed_duration_slice,
                             manifest_jsonl, render_frames, write_frs1, write_pgm)
from .trainer import (CLASS_LIBRARY, DatasetSpec, TrainConfig, build_dataset, evaluate, retrieve,
                      scene_for, train)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config files

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _classes(s: str) -> tuple[str, ...]:
    return tuple(c.strip() for c in s.split(",") if c.strip())


# key -> parser; every key may also be given as --key-with-dashes
CONFIG_KEYS = {
    "seed": int, "data_seed": int, "epochs": int, "batch_size": int, "lr": float, "lr_min": float,
    "weight_decay": float, "classes": _classes, "items_per_class": int, "noise_rate": float,
    "distractors": int, "width": int, "height": int, "label_mode": str, "delta": float,
    "n_min": int, "max_depth": int, "tau": float, "alpha": float, "beta": float, "theta": float,
    "n_samples": int, "use_cr": _bool, "use_ue": _bool,
}


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror or exc}") from None
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{no}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(key, value, f"{path}:{no}")
    return out


def _parse_value(key, value, where):
    if key not in CONFIG_KEYS:
        raise ValidationError(f"{where}: unknown key {key!r}")
    try:
        return CONFIG_KEYS[key](value)
    except ValueError as exc:
        raise ValidationError(f"{where}: bad value for {key}: {exc}") from None


def _add_config_flags(p):
    p.add_argument("--config", required=True, help="key=value file; flags override its values")
    for key in CONFIG_KEYS:
        p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="V")


def _settings(args) -> dict:
    cfg = read_config(args.config)
    for key in CONFIG_KEYS:
        v = getattr(args, "cfg_" + key)
        if v is not None:
            cfg[key] = _parse_value(key, v, "--" + key.replace("_", "-"))
    return cfg


def build_from_settings(cfg: dict):
    """(DatasetSpec, data seed, TrainConfig) from parsed settings."""
    ds_fields = {k: cfg[k] for k in ("classes", "items_per_class", "noise_rate", "distractors",
                                     "width", "height") if k in cfg}
    spec = DatasetSpec(**ds_fields)
    base = TrainConfig()
    afe = AfeConfig(cfg.get("delta", base.afe.delta), cfg.get("n_min", base.afe.n_min),
                    cfg.get("max_depth", base.afe.max_depth))
    loss = LossConfig(**{k: cfg[k] for k in ("tau", "alpha", "beta", "theta", "n_samples") if k in cfg})
    model = replace(base.model, frame_hw=(spec.height, spec.width))
    tc = replace(base, afe=afe, loss=loss, model=model,
                 **{k: cfg[k] for k in ("seed", "epochs", "batch_size", "lr", "lr_min", "weight_decay",
                                        "label_mode", "use_cr", "use_ue") if k in cfg})
    if tc.label_mode not in ("category", "caption"):
        raise ValidationError(f"label_mode must be category or caption, got {tc.label_mode!r}")
    return spec, cfg.get("data_seed", tc.seed), tc


def _model_for(spec, data_seed, tc, ckpt):
    dataset = build_dataset(spec, data_seed)
    model = CrueModel(dataset.vocab, tc.model, seed=tc.seed, use_cr=tc.use_cr, use_ue=tc.use_ue)
    load_checkpoint(model.store, ckpt)
    return dataset, model


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args):
    if args.cls not in CLASS_LIBRARY:
        raise ValidationError(f"unknown class {args.cls!r}; available: {', '.join(sorted(CLASS_LIBRARY))}")
    spec = DatasetSpec(width=args.width, height=args.height, noise_rate=args.noise_rate,
                       distractors=args.distractors)
    stream = generate_scene(scene_for(CLASS_LIBRARY[args.cls], args.seed, args.item, spec))
    write_stream(stream, args.out, args.format)
    print(f"wrote {len(stream)} events to {args.out}")


def _read(args):
    return read_stream(args.input, args.format, width=args.width, height=args.height)


def _afe_config(args) -> AfeConfig:
    base = PRESETS[args.preset] if args.preset else AfeConfig(0.5, 100_000)
    return AfeConfig(args.delta if args.delta is not None else base.delta,
                     args.n_min if args.n_min is not None else base.n_min,
                     args.max_depth if args.max_depth is not None else base.max_depth)


def _slice(args, stream):
    if args.method == "afe":
        tree = afe_slice(stream, _afe_config(args))
        return tree, render_frames(tree)
    if args.method == "count":
        return None, render_frames(fixed_count_slice(stream, args.count), stream, "count")
    return None, render_frames(fixed_duration_slice(stream, args.window), stream, "duration")


def cmd_slice(args):
    stream = _read(args)
    tree, frames = _slice(args, stream)
    out = Path(args.out)
    _mkdir(out)
    if tree is not None:
        _write_text(out / "manifest.jsonl", manifest_jsonl(tree))
    else:
        lines = [json.dumps({"index": i, "start": a, "end": b, "t_start": t0, "t_end": t1}, sort_keys=True)
                 for i, ((a, b), (t0, t1)) in enumerate(zip(frames.boundaries, frames.time_ranges))]
        _write_text(out / "manifest.jsonl", "".join(s + "\n" for s in lines))
    write_frs1(out / "frames.frs1", frames.export())
    print(f"leaves {len(frames)}")
    if tree is not None:
        for reason, n in tree.reason_tally().items():
            print(f"{reason} {n}")


def cmd_render(args):
    stream = _read(args)
    _, frames = _slice(args, stream)
    out = Path(args.out)
    _mkdir(out)
    for i, fr in enumerate(frames.frames):
        total = fr.sum(axis=-1)
        peak = total.max()
        gray = np.floor(total * (255.0 / peak) + 0.5) if peak > 0 else total
        write_pgm(out / f"frame_{i:04d}.pgm", gray.astype(np.uint8))
    print(f"wrote {len(frames)} frames to {out}")


def stream_stats(stream) -> dict:
    n = len(stream)
    duration = int(stream.t[-1] - stream.t[0]) if n else 0
    on = int(np.count_nonzero(stream.p == ON)) if n else 0
    return {"events": n, "duration_us": duration, "width": stream.width, "height": stream.height,
            "on": on, "off": n - on, "events_per_ms": (n / (duration / 1000.0)) if duration else 0.0}


def cmd_stats(args):
    for k, v in stream_stats(_read(args)).items():
        print(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")


def cmd_train(args):
    spec, data_seed, tc = build_from_settings(_settings(args))
    if args.ablate:
        tc = tc.ablate(args.ablate)
    dataset = build_dataset(spec, data_seed)
    result = train(dataset, tc)
    save_checkpoint(result.store, args.out)
    metrics = Path(args.metrics or f"{args.out}.metrics.csv")
    _write_text(metrics, result.metrics_csv())
    report = result.report.to_text()
    if args.report:
        _write_text(Path(args.report), report)
    sys.stdout.write(report)


def cmd_eval(args):
    spec, data_seed, tc = build_from_settings(_settings(args))
    dataset, model = _model_for(spec, data_seed, tc, args.ckpt)
    report = evaluate(model, dataset, args.split, tc).to_text()
    if args.out:
        _write_text(Path(args.out), report)
    sys.stdout.write(report)


def cmd_retrieve(args):
    spec, data_seed, tc = build_from_settings(_settings(args))
    dataset, model = _model_for(spec, data_seed, tc, args.ckpt)
    if args.query_events:
        query = read_stream(args.query_events, width=spec.width, height=spec.height)
    else:
        query = args.query_text.split()
    if args.corpus == "classes":
        corpus = dataset.labels(tc.label_mode)
        ids = list(dataset.class_names)
    else:
        idx = dataset.split("test")
        corpus = [dataset.items[i].stream for i in idx]
        ids = [f"test/{i:04d}:{dataset.class_names[dataset.items[i].label]}" for i in idx]
    for i, score in retrieve(model, query, corpus, args.k, tc.afe):
        print(f"{score:.6f}\t{ids[i]}")


# ---------------------------------------------------------------------------
# plumbing

def _mkdir(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create {path}: {exc.strerror or exc}") from None


def _write_text(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc.strerror or exc}") from None


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _stream_flags(p):
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["evt1", "csv"])
    p.add_argument("--width", type=int, help="sensor width for CSV input")
    p.add_argument("--height", type=int, help="sensor height for CSV input")


def _slice_flags(p):
    p.add_argument("--method", choices=["afe", "count", "duration"], default="afe")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--delta", type=float)
    p.add_argument("--n-min", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--count", type=_positive_int, default=10_000, help="events per frame (count method)")
    p.add_argument("--window", type=_positive_int, default=50_000, help="microseconds (duration method)")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evact", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write one synthetic labelled stream")
    p.add_argument("--class", dest="cls", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--item", type=int, default=0)
    p.add_argument("--width", type=_positive_int, default=32)
    p.add_argument("--height", type=_positive_int, default=32)
    p.add_argument("--noise-rate", type=float, default=0.001, help="noise events per microsecond")
    p.add_argument("--distractors", type=int, default=0)
    p.add_argument("--format", choices=["evt1", "csv"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("slice", help="adaptive or fixed slicing to manifest + FRS1 frames")
    _stream_flags(p)
    _slice_flags(p)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("render", help="one PGM per frame")
    _stream_flags(p)
    _slice_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("stats", help="event count, duration, geometry, polarity split")
    _stream_flags(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train on the synthetic task")
    _add_config_flags(p)
    p.add_argument("--ablate", choices=["none", "cr", "ue", "all"])
    p.add_argument("--out", required=True, help="CKP1 checkpoint path")
    p.add_argument("--metrics", help="metrics CSV (default <out>.metrics.csv)")
    p.add_argument("--report", help="write the test-split report here too")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-k accuracy of a checkpoint")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="rank captions or test streams for a query")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    q = p.add_mutually_exclusive_group(required=True)
    q.add_argument("--query-events")
    q.add_argument("--query-text")
    p.add_argument("--corpus", choices=["classes", "test"], default="classes")
    p.add_argument("--k", type=_positive_int, default=5)
    p.set_defaults(func=cmd_retrieve)
    return parser


def _check_threads():
    raw = os.environ.get("EVACT_THREADS", "1")
    if not raw.isdigit() or int(raw) < 1:
        raise ValidationError(f"EVACT_THREADS must be a positive integer, got {raw!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        _check_threads()
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValidationError, EvactError, KeyError, ValueError) as exc:
        # format, geometry, vocabulary and config problems are all input errors
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
