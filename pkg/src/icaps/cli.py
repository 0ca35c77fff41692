"""``icaps`` command line: training, evaluation, reports and dataset tools.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from icaps import evaluation as ev
from icaps import report
from icaps.config import Config, ConfigError, ModelConfig, parse_config
from icaps.data import (
    DatasetError,
    DatasetValidationError,
    SyntheticSpec,
    convert_idx,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from icaps.components import ModelState
from icaps.trainer import CheckpointConfigError, CheckpointError, Trainer, TrainingDiverged, load_checkpoint

log = logging.getLogger("icaps")

EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 2, 3, 4

_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load(args, split: str = "test"):
    state, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data, state.config.n_classes, split)
    if ds.image_shape != (state.config.channels, *state.config.image_size):
        raise DatasetValidationError(f"dataset images {ds.image_shape} do not fit the model")
    return state, ds


def _sample(ds, sample_id: int) -> np.ndarray:
    if not 0 <= sample_id < len(ds):
        raise DatasetValidationError(f"sample id {sample_id} outside [0, {len(ds)})")
    return ds.images[sample_id]


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands -------------------------------------------------------------------


def cmd_train(args) -> int:
    if args.config:
        model, train, weights = parse_config(args.config)
    else:
        cfg = Config()
        model, train, weights = cfg.model, cfg.train, cfg.weights
    if args.seed is not None:
        model.seed = train.seed = args.seed
    if args.epochs is not None:
        train.epochs = args.epochs
    Config(model, train, weights).validate()
    ds = load_dataset(args.data, model.n_classes, "train")
    if ds.image_shape != (model.channels, *model.image_size):
        raise DatasetValidationError(f"dataset images {ds.image_shape} do not match the model config")
    out = _out_dir(args.out)
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    state = ModelState(model, train)
    trainer = Trainer(state, train, weights, ds, log_path)
    history = trainer.fit(train.epochs, out)
    last = history[-1] if history else {}
    print(f"trained {train.epochs} epochs ({state.step} steps); checkpoints in {out}")
    _emit({"step": state.step, "final": last})
    return 0


def cmd_eval(args) -> int:
    state, ds = _load(args)
    acc = ev.accuracy_c(state, ds)
    print(f"accuracy_c: {acc!r}")
    return 0


def cmd_probe(args) -> int:
    state, _ = load_checkpoint(args.ckpt)
    k = state.config.n_classes
    train = load_dataset(args.train_data, k, "train")
    test = load_dataset(args.data, k, "test")
    cfg = ev.ProbeConfig(seed=args.seed if args.seed is not None else 0)
    res = ev.residual_probe(state, train, test, cfg)
    print(f"residual probe accuracy: {res.accuracy!r} (chance {res.chance!r})")
    _emit({"probe_accuracy": res.accuracy, "chance": res.chance})
    return 0


def cmd_mi(args) -> int:
    if args.bins < 2:
        raise DatasetValidationError("--bins must be at least 2")
    state, ds = _load(args)
    mi = ev.mi_report(state, ds, args.bins)
    out = _out_dir(args.out)
    report.write_mi_csv(out / "mi.csv", mi)
    report.plot_mi(out / "mi.png", mi)
    print(f"mean MI per element: c {mi.mean_c:.4f} nats, r {mi.mean_r:.4f} nats -> {out / 'mi.csv'}")
    return 0


def cmd_traverse(args) -> int:
    state, ds = _load(args)
    grid = ev.traversal_grid(state, _sample(ds, args.sample_id), args.steps)
    out = _out_dir(args.out)
    stem = out / f"traverse_{args.sample_id}"
    report.write_traversal(stem.with_suffix(".ppm"), grid)
    report.plot_traversal(stem.with_suffix(".png"), grid)
    score = ev.distinctness_score(grid)
    print(f"traversal grid {grid.shape[0]}x{grid.shape[1]} -> {stem.with_suffix('.ppm')}")
    _emit({"distinctness": score, "values": grid.values.tolist()})
    return 0


def cmd_swap(args) -> int:
    state, ds = _load(args)
    xi, xj = _sample(ds, args.i), _sample(ds, args.j)
    yi, yj = ds.labels[args.i : args.i + 1], ds.labels[args.j : args.j + 1]
    if yi[0] == yj[0]:
        raise DatasetValidationError(f"samples {args.i} and {args.j} share label {yi[0]}")
    res = ev.swap_grid(state, xi, xj, yi, yj)
    out = _out_dir(args.out)
    stem = out / f"swap_{args.i}_{args.j}"
    report.write_swap(stem.with_suffix(".ppm"), res)
    report.plot_swap(stem.with_suffix(".png"), res)
    print(f"swap quad -> {stem.with_suffix('.ppm')}")
    return 0


def cmd_explain(args) -> int:
    state, ds = _load(args)
    names = None
    if args.names:
        names = json.loads(Path(args.names).read_text())
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise DatasetValidationError("--names must be a JSON array of strings")
    rec = ev.explain_sample(state, _sample(ds, args.sample_id), args.sample_id, names)
    if args.out:
        report.write_explanations(Path(args.out), [rec])
    _emit(rec.to_dict())
    return 0


def cmd_make_synth(args) -> int:
    spec = SyntheticSpec()
    if args.spec:
        data = json.loads(Path(args.spec).read_text())
        unknown = set(data) - set(SyntheticSpec.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec key: {sorted(unknown)[0]}")
        if "thickness" in data:
            data["thickness"] = tuple(data["thickness"])
        spec = SyntheticSpec(**data)
    if args.seed is not None:
        spec.seed = args.seed
    ds, factors = generate_synthetic(spec, args.n, args.split)
    save_dataset(ds, args.out)
    if args.factors:
        Path(args.factors).write_text(json.dumps({k: v.tolist() for k, v in factors.values.items()}))
    print(f"wrote {len(ds)} synthetic samples to {args.out}")
    return 0


def cmd_convert(args) -> int:
    ds = convert_idx(args.images, args.labels, args.out, args.size)
    print(f"converted {len(ds)} samples to {args.out}")
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icaps", description="Disentangled capsule classifier tools.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    def with_ckpt(name, func, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--data", required=True)
        s.set_defaults(func=func)
        return s

    with_ckpt("eval", cmd_eval, "class-capsule accuracy")
    s = with_ckpt("probe-residual", cmd_probe, "label probe on the residual")
    s.add_argument("--train-data", required=True)
    s.add_argument("--seed", type=int)
    s = with_ckpt("mi-report", cmd_mi, "per-element mutual information")
    s.add_argument("--bins", type=int, default=20)
    s.add_argument("--out", default=".")
    s = with_ckpt("traverse", cmd_traverse, "latent traversal grid")
    s.add_argument("--sample-id", type=int, required=True)
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--out", default=".")
    s = with_ckpt("swap", cmd_swap, "swap class-relevant parts of two samples")
    s.add_argument("--i", type=int, required=True)
    s.add_argument("--j", type=int, required=True)
    s.add_argument("--out", default=".")
    s = with_ckpt("explain", cmd_explain, "explanation record for one sample")
    s.add_argument("--sample-id", type=int, required=True)
    s.add_argument("--names")
    s.add_argument("--out")

    s = sub.add_parser("make-synth", help="generate the synthetic dataset")
    s.add_argument("--spec")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--split", default="train", choices=("train", "test"))
    s.add_argument("--factors")
    s.set_defaults(func=cmd_make_synth)

    s = sub.add_parser("convert", help="convert IDX image/label files")
    s.add_argument("--in", dest="images", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=16)
    s.set_defaults(func=cmd_convert)
    return p


def _setup_logging() -> None:
    name = os.environ.get("ICAPS_LOG_LEVEL", "error").lower()
    level = _LEVELS.get(name, logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("icaps").setLevel(level)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    try:
        return args.func(args)
    except CheckpointConfigError as exc:
        print(f"icaps: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, DatasetError, CheckpointError) as exc:
        print(f"icaps: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DatasetValidationError, TrainingDiverged, ValueError) as exc:
        print(f"icaps: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
