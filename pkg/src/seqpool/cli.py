"""Command-line entry point: ``seqpool <command> ...``.

Every command writes ``manifest.json`` into its output directory with the
resolved arguments, input/output hashes and timing.  ``seqpool replay`` reruns
a manifest and checks that the data outputs come out byte-identical.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (SyntheticSpec, generate_synthetic, load_dataset, make_split, save_dataset,
                     spec_metadata, track_flow, FEATURE_FILE, IdentityRecord)
from .errors import ConfigError, FormatError, SeqpoolError
from .evaluation import (CmcCurve, ConvergenceHistory, aggregate_trials, compare_architectures, write_cmc_csv,
                         write_diff_csv, write_history_csv)
from .experiments import evaluate_split, train_trial
from .model import META_FILE, Model
from .plots import plot_cmc, plot_diff, plot_history
from .trainer import TrainConfig, parse_kv

MANIFEST = "manifest.json"
SEED_ENV = "SEQPOOL_SEED"
# files excluded from byte-identity checks: they carry timestamps
_VOLATILE_SUFFIXES = (".log",)


# ---------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def data_outputs(root: Path) -> dict[str, str]:
    root = Path(root)
    return {str(p.relative_to(root)): _sha256(p) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != MANIFEST and not p.name.endswith(_VOLATILE_SUFFIXES)}


def write_manifest(out: Path, command: str, argv: list[str], config: dict, seed: int | None,
                   inputs: dict[str, Path], started: float) -> dict:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": {k: tree_hash(v) if Path(v).is_dir() else _sha256(Path(v)) for k, v in inputs.items()},
        "input_paths": {k: str(v) for k, v in inputs.items()},
        "outputs": data_outputs(out),
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_seconds": round(time.time() - started, 3),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def detect_format(root: Path) -> str:
    meta = Path(root) / "dataset.json"
    if meta.exists():
        return json.loads(meta.read_text()).get("kind", "features")
    return "features" if any(Path(root).glob(f"id*/camA/{FEATURE_FILE}")) else "images"


def checkpoint_dirs(path: Path) -> list[Path]:
    """A single checkpoint directory, or the ``trialNN`` checkpoints below a run directory."""
    path = Path(path)
    if (path / META_FILE).exists():
        return [path]
    dirs = sorted(p for p in path.glob("trial*") if (p / META_FILE).exists())
    if not dirs:
        raise FormatError(f"{path} contains no checkpoint")
    return dirs


def _trial_of(ckpt: Path, default: int) -> int:
    name = ckpt.name
    return int(name[5:]) if name.startswith("trial") and name[5:].isdigit() else default


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return h, w


def _parse_range(text: str) -> tuple[int, int]:
    parts = text.split(":")
    try:
        lo, hi = (int(parts[0]), int(parts[-1]))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO:HI, got {text!r}")
    return lo, hi


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, argv) -> int:
    if args.ids < 1:
        raise _UsageError("--ids must be at least 1")
    started = time.time()
    out = _prepare_out(args.out, args.force)
    argv = _replace_opt(argv, "--seed", str(resolve_seed(args.seed)))
    spec = SyntheticSpec(n_ids=args.ids, frames=args.frames, dim=args.dim, signal=args.signal,
                         noise=args.noise, track_noise=args.track_noise, camera_shift=args.camera_shift,
                         frame_nuisance=args.frame_nuisance, signal_dims=args.signal_dims,
                         seed=resolve_seed(args.seed), image_size=args.image_size)
    records = generate_synthetic(spec)
    save_dataset(out, records, spec_metadata(spec))
    write_manifest(out, "synth", argv, spec_metadata(spec), spec.seed, {}, started)
    print(f"wrote {len(records)} identities x 2 tracks to {out}")
    return 0


def cmd_flow(args, argv) -> int:
    started = time.time()
    src = Path(args.data)
    records = load_dataset(src, "images")
    out = _prepare_out(args.out, args.force)
    processed = [IdentityRecord(r.identity, tuple(track_flow(t, args.window, args.clamp) for t in r.tracks))
                 for r in records]
    meta = {}
    if (src / "dataset.json").exists():
        meta = json.loads((src / "dataset.json").read_text())
    meta.update({"kind": "images", "flow_window": args.window, "flow_clamp": args.clamp})
    save_dataset(out, processed, meta)
    write_manifest(out, "flow", argv, {"window": args.window, "clamp": args.clamp}, None,
                   {"data": src}, started)
    print(f"computed flow for {len(processed)} identities into {out}")
    return 0


def build_config(args) -> TrainConfig:
    values = parse_kv(Path(args.config).read_text()) if args.config else {}
    flags = {"mode": args.mode, "arch": args.arch, "B": args.B, "L": args.L, "feature_dim": args.dim,
             "margin": args.margin, "learning_rate": args.lr, "epochs": args.epochs,
             "iterations": args.iterations, "dropout_p": args.dropout, "id_loss_weight": args.id_weight,
             "crop": args.crop, "mirror_prob": args.mirror_prob}
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.seed is not None or "seed" not in values:
        values["seed"] = resolve_seed(args.seed)
    return TrainConfig(**values)


def _train_one(data: str, fmt: str, trial: int, split_seed: int, config: TrainConfig,
               eval_every: int, out: str) -> dict:
    records = load_dataset(data, fmt)
    tdir = Path(out) / f"trial{trial:02d}"
    tdir.mkdir(parents=True, exist_ok=True)
    with open(tdir / "train.log", "w") as log:
        run = train_trial(records, trial, split_seed, config, eval_every, log_stream=log)
    run.result.model.save(tdir)
    (tdir / "split.json").write_text(json.dumps(asdict(run.split), indent=2, sort_keys=True) + "\n")
    if run.history is not None:
        write_history_csv(tdir / "history.csv", run.history)
    return {"trial": trial, "history": run.history}


def cmd_train(args, argv) -> int:
    config = build_config(args)
    if args.print_config:
        sys.stdout.write(config.to_kv())
        return 0
    started = time.time()
    argv = _replace_opt(argv, "--seed", str(config.seed))
    fmt = args.format or detect_format(args.data)
    out = _prepare_out(args.out, args.force)
    (out / "config.kv").write_text(config.to_kv())
    split_seed = args.split_seed if args.split_seed is not None else config.seed
    trials = range(args.first_trial, args.first_trial + args.trials)
    jobs = [(str(args.data), fmt, t, split_seed, config, args.eval_every, str(out)) for t in trials]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_train_one, *zip(*jobs)))
    else:
        results = [_train_one(*j) for j in jobs]
    histories = [r["history"] for r in results if r["history"] is not None]
    if histories:
        _write_mean_history(out, histories, f"{config.arch.upper()}-{config.mode.upper()}")
    for ckpt in checkpoint_dirs(out):
        Model.load(ckpt)
    cfg = asdict(config)
    cfg.update({"split_seed": split_seed, "trials": list(trials), "format": fmt})
    write_manifest(out, "train", argv, cfg, config.seed, {"data": Path(args.data)}, started)
    print(f"trained {len(results)} trial(s) into {out}")
    return 0


def _write_mean_history(out: Path, histories, label: str) -> None:
    mean = ConvergenceHistory()
    for k, p in enumerate(histories[0].progress):
        vals = np.mean([h.curves[k].values for h in histories], axis=0)
        mean.add(p, histories[0].iterations[k], CmcCurve(vals))
    write_history_csv(out / "history.csv", mean)
    plot_history({label: (np.array(mean.progress), mean.series(1))}, out / "history.png")


def transplant_checkpoint(src: Path, dst: Path) -> None:
    model = Model.load(src)
    flipped = "fnn" if model.arch == "rnn" else "rnn"
    dst.mkdir(parents=True, exist_ok=True)
    for f in src.iterdir():
        if f.is_file() and f.name not in (META_FILE, MANIFEST):
            shutil.copyfile(f, dst / f.name)
    meta = json.loads((src / META_FILE).read_text())
    meta["arch"] = flipped
    (dst / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    reloaded = Model.load(dst)
    if not reloaded.stage.equals(model.stage):
        raise FormatError(f"transplanted parameters in {dst} differ from {src}")


def cmd_transplant(args, argv) -> int:
    started = time.time()
    src = Path(args.input)
    out = _prepare_out(args.out, args.force)
    ckpts = checkpoint_dirs(src)
    for ck in ckpts:
        transplant_checkpoint(ck, out if ck == src else out / ck.name)
    for f in ("config.kv",):
        if (src / f).exists() and ckpts[0] != src:
            shutil.copyfile(src / f, out / f)
    src_manifest = src / MANIFEST
    if src_manifest.exists() and ckpts[0] != src:
        # keep the training split provenance for the eval leakage guard
        train_meta = json.loads(src_manifest.read_text())
        (out / "train_provenance.json").write_text(json.dumps(
            {"split_seed": train_meta.get("config", {}).get("split_seed"),
             "trials": train_meta.get("config", {}).get("trials")}, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "transplant", argv, {}, None, {"checkpoint": src}, started)
    print(f"transplanted {len(ckpts)} checkpoint(s) into {out}")
    return 0


def _training_split_seed(ckpt_root: Path) -> int | None:
    for name in (MANIFEST, "train_provenance.json"):
        p = ckpt_root / name
        if p.exists():
            meta = json.loads(p.read_text())
            cfg = meta.get("config", meta) if name == MANIFEST else meta
            if "split_seed" in cfg and cfg["split_seed"] is not None:
                return int(cfg["split_seed"])
    return None


def _eval_one(data: str, fmt: str, ckpt: str, trial: int, split_seed: int, arch: str | None) -> np.ndarray:
    records = load_dataset(data, fmt)
    split = make_split(records, trial, split_seed)
    return evaluate_split(records, split, Model.load(ckpt), arch).values


def cmd_eval(args, argv) -> int:
    started = time.time()
    fmt = args.format or detect_format(args.data)
    ckpt_root = Path(args.ckpt)
    ckpts = checkpoint_dirs(ckpt_root)
    split_seed = resolve_seed(args.split_seed)
    argv = _replace_opt(argv, "--split-seed", str(split_seed))
    trained_with = _training_split_seed(ckpt_root)
    if trained_with is not None and trained_with != split_seed:
        warnings.warn(f"evaluation split seed {split_seed} differs from the training split seed "
                      f"{trained_with}: test identities may have been seen in training", stacklevel=1)
    if len(ckpts) > 1:
        pairs = [(c, _trial_of(c, k)) for k, c in enumerate(ckpts)][:args.trials]
        if len(pairs) < args.trials:
            raise ConfigError(f"{args.trials} trials requested but only {len(pairs)} checkpoints in {ckpt_root}")
    else:
        pairs = [(ckpts[0], t) for t in range(args.trials)]
    out = _prepare_out(args.out, args.force)
    jobs = [(str(args.data), fmt, str(c), t, split_seed, args.arch) for c, t in pairs]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            curves = list(ex.map(_eval_one, *zip(*jobs)))
    else:
        curves = [_eval_one(*j) for j in jobs]
    agg = aggregate_trials(curves, allow_single=True)
    write_cmc_csv(out / "cmc.csv", agg)
    with open(out / "trials.csv", "w") as fh:
        fh.write("trial,rank,value\n")
        for (_, t), c in zip(pairs, curves):
            for k, v in enumerate(c, 1):
                fh.write(f"{t},{k},{v:.6g}\n")
    arch = args.arch or Model.load(ckpts[0]).arch
    plot_cmc({arch.upper(): agg}, out / "cmc.png")
    write_manifest(out, "eval", argv, {"trials": [t for _, t in pairs], "split_seed": split_seed,
                                       "arch": arch, "format": fmt},
                   split_seed, {"data": Path(args.data), "checkpoint": ckpt_root}, started)
    print(f"rank-1 {agg.mean[0]:.4f} over {len(curves)} trial(s); wrote {out / 'cmc.csv'}")
    return 0


def read_trials_csv(path: Path) -> dict[int, np.ndarray]:
    rows: dict[int, list[float]] = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            t, _, v = line.strip().split(",")
            rows.setdefault(int(t), []).append(float(v))
    return {t: np.array(v) for t, v in rows.items()}


def cmd_compare(args, argv) -> int:
    started = time.time()
    a = read_trials_csv(Path(args.a) / "trials.csv")
    b = read_trials_csv(Path(args.b) / "trials.csv")
    if sorted(a) != sorted(b):
        raise ConfigError(f"trial sets differ: {sorted(a)} vs {sorted(b)}")
    trials = sorted(a)
    agg = compare_architectures([a[t] for t in trials], [b[t] for t in trials], allow_single=True)
    out = _prepare_out(args.out, args.force)
    write_diff_csv(out / "diff.csv", agg)
    plot_diff(agg, out / "diff.png", label=f"{args.label_a} - {args.label_b}")
    if len(trials) > 1:
        plot_cmc({args.label_a: aggregate_trials([a[t] for t in trials]),
                  args.label_b: aggregate_trials([b[t] for t in trials])}, out / "cmc_both.png")
    write_manifest(out, "compare", argv, {"trials": trials}, None,
                   {"a": Path(args.a) / "trials.csv", "b": Path(args.b) / "trials.csv"}, started)
    print(f"mean rank-1 difference {agg.mean[0]:+.4f}; wrote {out / 'diff.csv'}")
    return 0


def cmd_replay(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    old_out = Path(args.manifest).parent
    rec_argv = list(manifest["argv"])
    out = Path(args.out) if args.out else old_out.with_name(old_out.name + "_replay")
    rec_argv = _replace_opt(rec_argv, "--out", str(out))
    if "--force" not in rec_argv:
        rec_argv.append("--force")
    code = main(rec_argv)
    if code != 0:
        return code
    new = data_outputs(out)
    old = manifest["outputs"]
    bad = sorted(k for k in set(old) | set(new) if old.get(k) != new.get(k))
    if bad:
        print(f"replay mismatch in {len(bad)} file(s): {', '.join(bad[:5])}", file=sys.stderr)
        return 1
    print(f"replay of {manifest['command']} reproduced {len(new)} output file(s) byte-identically")
    return 0


def _replace_opt(argv: list[str], opt: str, value: str) -> list[str]:
    out = list(argv)
    if opt in out:
        out[out.index(opt) + 1] = value
    else:
        out += [opt, value]
    return out


# ---------------------------------------------------------------------------
# parser


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqpool", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic two-camera dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--ids", type=int, default=40)
    s.add_argument("--frames", type=_parse_range, default=(24, 24), help="N or LO:HI frames per track")
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--signal", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.5)
    s.add_argument("--track-noise", type=float, default=0.0)
    s.add_argument("--camera-shift", type=float, default=0.0)
    s.add_argument("--frame-nuisance", type=float, default=0.0)
    s.add_argument("--signal-dims", type=int, default=None)
    s.add_argument("--image-size", type=_parse_hw, default=None, help="render HxW 5-channel images")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("flow", help="Lucas-Kanade flow channels for an image dataset")
    f.add_argument("--data", required=True, type=Path)
    f.add_argument("--out", required=True, type=Path)
    f.add_argument("--window", type=int, default=5)
    f.add_argument("--clamp", type=float, default=8.0)
    f.add_argument("--force", action="store_true")
    f.set_defaults(func=cmd_flow)

    t = sub.add_parser("train", help="Siamese training in SEQ or FRM mode")
    t.add_argument("--data", type=Path)
    t.add_argument("--out", type=Path)
    t.add_argument("--format", choices=("features", "images"))
    t.add_argument("--config", type=Path, help="key=value file; flags override it")
    t.add_argument("--mode", choices=("seq", "frm"))
    t.add_argument("--arch", choices=("rnn", "fnn"))
    t.add_argument("--B", type=int)
    t.add_argument("--L", type=int)
    t.add_argument("--dim", type=int, help="feature dimension of the sequence stage")
    t.add_argument("--margin", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--iterations", type=int, help="fixed iteration budget (overrides --epochs)")
    t.add_argument("--dropout", type=float)
    t.add_argument("--id-weight", type=float)
    t.add_argument("--crop", type=_parse_hw)
    t.add_argument("--mirror-prob", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--split-seed", type=int)
    t.add_argument("--trials", type=int, default=1)
    t.add_argument("--first-trial", type=int, default=0)
    t.add_argument("--eval-every", type=int, default=0, help="track test CMC every N iterations")
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("transplant", help="reinterpret stage weights under the other architecture")
    x.add_argument("--in", dest="input", required=True, type=Path)
    x.add_argument("--out", required=True, type=Path)
    x.add_argument("--force", action="store_true")
    x.set_defaults(func=cmd_transplant)

    e = sub.add_parser("eval", help="CMC evaluation over trial splits")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--format", choices=("features", "images"))
    e.add_argument("--trials", type=int, default=1)
    e.add_argument("--split-seed", type=int)
    e.add_argument("--arch", choices=("rnn", "fnn"), help="override the checkpoint architecture")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="paired per-trial CMC differences of two evaluations")
    c.add_argument("--a", required=True, type=Path)
    c.add_argument("--b", required=True, type=Path)
    c.add_argument("--out", required=True, type=Path)
    c.add_argument("--label-a", default="A")
    c.add_argument("--label-b", default="B")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("replay", help="rerun a manifest and verify byte-identical outputs")
    r.add_argument("manifest", type=Path)
    r.add_argument("--out", type=Path)
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not args.print_config and (args.data is None or args.out is None):
        parser.error("train requires --data and --out")
    try:
        return args.func(args, argv)
    except _UsageError as exc:
        parser.error(str(exc))
    except ConfigError as exc:
        print(f"seqpool {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (SeqpoolError, FileExistsError) as exc:
        print(f"seqpool {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
