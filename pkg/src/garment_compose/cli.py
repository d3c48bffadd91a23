"""Command-line entry point.

Exit codes: 0 success, 1 a check ran and failed, 2 usage or configuration
error, 3 numeric failure (NaN or Inf during training or evaluation).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .ablation import ablation_csv, build_data, evaluate, net_config, run_ablation, train_model
from .config import RunConfig
from .dataset import Dataset, DatasetConfig, generate_dataset, load_dataset
from .errors import BindingError, CapacityError, DimensionError, EvaluationError, ModeError, ParameterError
from .metrics import region_fidelity
from .tensor_core import read_tensor, write_tensor
from .toy_world import write_pgm
from .training import ComposerModel, loss_gradcheck, sample_many, write_loss_csv

COMMANDS = ("gen-dataset", "train", "sample", "tryon", "album", "ablate", "gradcheck", "metrics")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="garment-compose", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON RunConfig; flags override its fields")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    ap.add_argument("--mode", choices=("generation", "tryon", "album"))
    ap.add_argument("--binding", choices=("none", "bind1", "bind123", "convin", "convin_mask"))
    ap.add_argument("--consistency", choices=("independent", "cfa", "caa", "lca"))
    ap.add_argument("--steps", type=int, help="training steps")
    ap.add_argument("--sample-steps", type=int, help="reverse-chain length (default T)")
    ap.add_argument("--n", type=int, help="dataset size")
    ap.add_argument("--train-inline", action="store_true",
                    help="train the model(s) in this run instead of loading a checkpoint")
    ap.add_argument("--size", choices=("small", "medium"), default="small",
                    help="gradcheck model size")
    ap.add_argument("--dataset", help="dataset directory written by gen-dataset")
    ap.add_argument("--checkpoint", help="checkpoint directory written by train")
    ap.add_argument("--images", help="directory of sample_###.tensor files (metrics)")
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in
                 ("seed", "out", "mode", "binding", "consistency", "steps", "n", "dataset", "checkpoint")
                 if getattr(args, k) is not None}
    if args.sample_steps is not None:
        overrides["sample_steps"] = args.sample_steps
    if args.command == "tryon":
        overrides["mode"] = "tryon"
    elif args.command == "album":
        overrides["mode"] = "album"
    return cfg.replace(**overrides)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _training_data(cfg: RunConfig) -> Dataset:
    if cfg.dataset:
        return _load(cfg.dataset)
    return generate_dataset(DatasetConfig(n=cfg.n, height=cfg.height, width=cfg.width), cfg.seed)


def _eval_data(cfg: RunConfig) -> Dataset:
    if cfg.dataset:
        ds = _load(cfg.dataset)
        return Dataset(ds.config, ds.seed, ds.samples[:cfg.n_eval])
    return build_data(cfg.replace(n=0))[1]


def _load(path) -> Dataset:
    if not (Path(path) / "manifest.json").exists():
        raise ParameterError(f"no dataset manifest under {path}")
    return load_dataset(path)


def _model(cfg: RunConfig, out: Path, inline: bool) -> ComposerModel:
    if cfg.checkpoint:
        if not (Path(cfg.checkpoint) / "model.json").exists():
            raise ParameterError(f"no checkpoint under {cfg.checkpoint}")
        model = ComposerModel.load(cfg.checkpoint)
    elif inline:
        model, losses = train_model(cfg, cfg.binding, cfg.seed, _training_data(cfg))
        write_loss_csv(out / "loss.csv", losses)
    else:
        raise ParameterError("need --checkpoint or --train-inline")
    want = "tryon" if cfg.mode == "tryon" else "generation"
    if model.cfg.mode != want:
        raise ModeError(f"checkpoint is a {model.cfg.mode} model, run needs {want}")
    if model.cfg.latent_hw != cfg.latent_hw:
        raise DimensionError(f"checkpoint latent {model.cfg.latent_hw} vs canvas {cfg.canvas}")
    return model


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_dataset(cfg: RunConfig, args, out: Path) -> int:
    generate_dataset(DatasetConfig(n=cfg.n, height=cfg.height, width=cfg.width), cfg.seed, out)
    return 0


def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    model, losses = train_model(cfg, cfg.binding, cfg.seed, _training_data(cfg))
    model.save(out / "checkpoint")
    write_loss_csv(out / "loss.csv", losses)
    return 0


def cmd_sample(cfg: RunConfig, args, out: Path) -> int:
    model = _model(cfg, out, args.train_inline)
    data = _eval_data(cfg)
    seeds = [cfg.seed * 10_000 + i for i in range(len(data))]
    images = sample_many(model, data.samples, seeds, cfg.sample_steps)
    reports = []
    for i, (img, s) in enumerate(zip(images, data.samples)):
        write_pgm(out / f"sample_{i:03d}.pgm", img)
        write_tensor(out / f"sample_{i:03d}.tensor", img)
        reports.append(region_fidelity(img, s).to_dict())
    _dump(out / "metrics.json", {"samples": reports, "seeds": seeds})
    return 0


def cmd_album(cfg: RunConfig, args, out: Path) -> int:
    from .album import album_fidelity, album_figures, consistency_album, face_distance, write_album

    model = _model(cfg.replace(mode="generation"), out, args.train_inline)
    sample = _eval_data(cfg.replace(n_eval=max(cfg.n_eval, 1))).samples[0]
    figures = album_figures(cfg.canvas, cfg.album_size, cfg.seed)
    album, images = consistency_album(model, sample.composition, sample.prompt, figures,
                                      cfg.consistency, cfg.seed, steps=cfg.sample_steps)
    album.mode = cfg.consistency
    write_album(out, album, images)
    reports = album_fidelity(album, sample.assets, images)
    _dump(out / "metrics.json", {"face_distance": face_distance(album, images),
                                 "frames": [r.to_dict() for r in reports]})
    return 0


def cmd_ablate(cfg: RunConfig, args, out: Path) -> int:
    if not args.train_inline:
        raise ParameterError("ablate trains every cell itself; pass --train-inline")
    rows = run_ablation(cfg)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    return 0


def cmd_gradcheck(cfg: RunConfig, args, out: Path) -> int:
    report = loss_gradcheck(args.size, cfg.seed, binding=cfg.binding)
    text = report.table() + f"\n{report.probes} probes, worst {report.worst:.3e}, tol {report.tol:g}: " \
        + ("PASS" if report.passed else "FAIL") + "\n"
    print(text, end="")
    (out / "gradcheck.txt").write_text(text)
    return 0 if report.passed else 1


def cmd_metrics(cfg: RunConfig, args, out: Path) -> int:
    if not args.images:
        raise ParameterError("metrics needs --images")
    data = _eval_data(cfg)
    reports = []
    for i, s in enumerate(data.samples):
        path = Path(args.images) / f"sample_{i:03d}.tensor"
        if not path.exists():
            raise ParameterError(f"missing {path}")
        reports.append(region_fidelity(read_tensor(path), s).to_dict())
    summary = {"mean_error": float(np.mean([r["mean_error"] for r in reports])) if reports else 0.0,
               "mean_corr": float(np.mean([r["mean_corr"] for r in reports])) if reports else 0.0}
    _dump(out / "metrics.json", {"samples": reports, "summary": summary})
    print(json.dumps(summary, sort_keys=True))
    return 0


HANDLERS = {
    "gen-dataset": cmd_gen_dataset, "train": cmd_train, "sample": cmd_sample,
    "tryon": cmd_sample, "album": cmd_album, "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck, "metrics": cmd_metrics,
}


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return 0 if e.code == 0 else 2
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        code = HANDLERS[args.command](cfg, args, out)
        cfg.replace(out=".").save(out / "run_config.json")
        return code
    except (EvaluationError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (ParameterError, ModeError, DimensionError, BindingError, CapacityError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
