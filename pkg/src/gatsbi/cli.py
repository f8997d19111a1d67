"""Command-line entry point: ``gatsbi <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import SEED_ENV_VAR, Config, load_config
from .data import load_trajectories, write_trajectories
from .errors import GatsbiError
from .harness import (
    Checkpoint,
    Dataset,
    MetricsTable,
    ablation_config,
    build_dataset,
    evaluate,
    evaluate_baselines,
    fold_errors,
    predict_windows,
    train,
)
from .synthetic import generate_dataset

log = logging.getLogger("gatsbi")


def _env_seed(default: int) -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    return int(raw) if raw not in (None, "") else default


def _horizon_path(path: Path, horizon: int, many: bool) -> Path:
    if "{horizon}" in str(path):
        return Path(str(path).format(horizon=horizon))
    return path.with_name(f"{path.stem}_h{horizon}{path.suffix}") if many else path


def _load_scenes(args, cfg: Config):
    return load_trajectories(args.data, fps=args.fps if args.fps else cfg.generator.fps)


def _emit_table(table: MetricsTable, metrics_path: str | None):
    print(table.render())
    if metrics_path:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        table.write_csv(metrics_path)
        print(f"\nmetrics written to {metrics_path}")
    else:
        print()
        print(table.to_csv(), end="")


def cmd_gen_synthetic(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    for key in ("agents", "duration", "radius", "fps", "warmup", "sigma_obs"):
        value = getattr(args, key)
        if value is not None:
            overrides[f"generator__{key}"] = value
    cfg = cfg.replace(**overrides)
    seed = args.seed if args.seed is not None else _env_seed(0)
    scenes = generate_dataset(cfg.generator, args.scenes, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectories(scenes, out)
    events = sum(len(s.metadata["overtaking_events"]) for s in scenes)
    print(f"wrote {len(scenes)} scene(s), {cfg.generator.agents} agents each, {events} overtaking event(s) to {out}")
    return 0


def _train_config(args) -> Config:
    cfg = load_config(args.config)
    overrides = {}
    if args.model:
        overrides["model__name"] = args.model
    if args.epochs is not None:
        overrides["train__epochs"] = args.epochs
    if args.seed is not None:
        overrides["train__seed"] = args.seed
        overrides["dataset__seed"] = args.seed
    if args.folds:
        overrides["train__folds"] = args.folds
    if args.horizon:
        overrides["dataset__horizons"] = args.horizon
    cfg = cfg.replace(**overrides)
    ablation = args.ablation or cfg.train.ablation
    if ablation:
        cfg = ablation_config(ablation, cfg)
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    scenes = _load_scenes(args, cfg)
    table = MetricsTable()
    horizons = list(cfg.dataset.horizons)
    ckpt_path = Path(args.checkpoint)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    for horizon in horizons:
        data = build_dataset(scenes, cfg, horizon)
        log.info("horizon %d: %d windows", horizon, len(data.tensors))
        ckpt = train(cfg, data)
        path = _horizon_path(ckpt_path, horizon, len(horizons) > 1)
        ckpt.save(path)
        label = cfg.model.name if not (args.ablation or cfg.train.ablation) else \
            "+".join(args.ablation or cfg.train.ablation)
        table.add(evaluate(ckpt, data, label=label))
        if args.baselines:
            table.extend(evaluate_baselines(data, ckpt.folds))
        print(f"horizon {horizon}: checkpoint {path} (epoch {ckpt.selected_epoch})")
        if args.figures:
            from .plotting import plot_training_curve, save_figure
            save_figure(plot_training_curve(ckpt.log, title=f"{label}, {horizon} frames"),
                        Path(args.figures) / f"training_h{horizon}.png")
    _emit_table(table, args.metrics)
    return 0


def _dataset_for(args, ckpt: Checkpoint) -> tuple[Config, Dataset]:
    cfg = Config.from_dict(ckpt.config)
    if args.horizon is not None and args.horizon != ckpt.t_pred:
        raise GatsbiError(f"checkpoint was trained for {ckpt.t_pred} frames, not {args.horizon}")
    scenes = _load_scenes(args, cfg)
    return cfg, build_dataset(scenes, cfg, ckpt.t_pred)


def _window_fold(ckpt: Checkpoint, scene_id: str) -> int:
    fold = ckpt.scene_fold.get(scene_id)
    return fold if fold in ckpt.states else ckpt.folds[0]


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg, data = _dataset_for(args, ckpt)
    sampler = args.sampler or cfg.output.sampler
    table = MetricsTable([evaluate(ckpt, data, sampler=sampler, label=args.label)])
    if args.baselines:
        table.extend(evaluate_baselines(data, ckpt.folds))
    _emit_table(table, args.metrics)
    if args.figures:
        written = _evaluation_figures(ckpt, data, sampler, Path(args.figures))
        for p in written:
            print(f"figure {p}")
    return 0


def _evaluation_figures(ckpt: Checkpoint, data: Dataset, sampler: str, out_dir: Path) -> list[Path]:
    from .plotting import plot_error_distribution, save_figure

    written = []
    tensors = data.tensors
    ade_all, fde_all, labels = [], [], []
    fold = ckpt.folds[0]
    idx = np.array([i for i, s in enumerate(tensors.scene_ids) if ckpt.scene_fold.get(s) == fold])
    model = ckpt.model(fold)
    pred = predict_windows(model, tensors, idx, sampler)
    ade, fde = fold_errors(pred, tensors, idx)
    ade_all.append(ade)
    fde_all.append(fde)
    labels.append(ckpt.model_name)
    for m, name in ((0, "const_v"), (3, "xkalman")):
        a, f = fold_errors(tensors.physics[idx, m], tensors, idx)
        ade_all.append(a)
        fde_all.append(f)
        labels.append(name)
    written.append(save_figure(plot_error_distribution(ade_all, fde_all, labels,
                                                       title=f"fold {fold}, {data.horizon} frames"),
                               out_dir / f"errors_h{data.horizon}.png"))
    # the window with the most neighbours makes the most informative scene plot
    pick = int(idx[np.argmax(tensors.nb_valid[idx].sum(axis=1))])
    written.extend(_window_figures(ckpt, data, pick, sampler, out_dir))
    return written


def _window_figures(ckpt: Checkpoint, data: Dataset, index: int, sampler: str, out_dir: Path) -> list[Path]:
    from .plotting import plot_scene, plot_uncertainty, save_figure

    tensors = data.tensors
    model = ckpt.model(_window_fold(ckpt, tensors.scene_ids[index]))
    batch = tensors.batch([index])
    with torch.no_grad():
        out = model(batch)
        pred = model.predict(batch, sampler, batch["ego_fut"] if sampler == "best_mode" else None)[0].numpy()
    attn = out["attention"][0].numpy() if out["attention"] is not None else None
    safe = tensors.window_ids[index].replace(":", "_")
    written = [save_figure(plot_scene(tensors, index, pred, attn), out_dir / f"scene_{safe}.png")]
    if "mixture" in out:
        single = out["mixture"].map(lambda t: t[0])
        written.append(save_figure(plot_uncertainty(tensors, index, single), out_dir / f"uncertainty_{safe}.png"))
    return written


def _predict_payload(ckpt: Checkpoint, data: Dataset, window_id: str, sampler: str, emit_attention: bool) -> dict:
    tensors = data.tensors
    index = tensors.index_of(window_id)
    fold = _window_fold(ckpt, tensors.scene_ids[index])
    model = ckpt.model(fold)
    batch = tensors.batch([index])
    with torch.no_grad():
        out = model(batch)
        truth = batch["ego_fut"] if sampler == "best_mode" else None
        pred = model.predict(batch, sampler, truth)[0]
    payload = {
        "window_id": window_id,
        "model": ckpt.model_name,
        "fold": fold,
        "horizon_frames": ckpt.t_pred,
        "sampler": sampler if "mixture" in out else "unimodal",
        "coordinates": "relative_lane" if Config.from_dict(ckpt.config).geometry.coordinates == "lane"
        else "relative_cartesian",
        "forecast": pred.double().tolist(),
    }
    if "mixture" in out:
        payload["mixture"] = out["mixture"].map(lambda t: t[0].double()).to_dict()
    if emit_attention:
        if out["attention"] is None:
            raise GatsbiError(f"model {ckpt.model_name} has no social attention")
        valid = np.r_[True, tensors.nb_valid[index]]
        slots = ["ego"] + list(tensors.neighbor_ids[index])
        slots += [""] * (len(valid) - len(slots))
        A = out["attention"][0].double().numpy()[np.ix_(valid, valid)]
        payload["attention"] = {"nodes": [n for n, v in zip(slots, valid) if v], "matrix": A.tolist()}
    return payload


def cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg, data = _dataset_for(args, ckpt)
    sampler = args.sampler or cfg.output.sampler
    ids = args.window_id or data.tensors.window_ids[: args.limit]
    payloads = [_predict_payload(ckpt, data, w, sampler, args.emit_attention) for w in ids]
    text = json.dumps(payloads if len(payloads) != 1 else payloads[0], indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote {len(payloads)} forecast(s) to {args.out}")
    else:
        print(text)
    return 0


def cmd_plot(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg, data = _dataset_for(args, ckpt)
    sampler = args.sampler or cfg.output.sampler
    out_dir = Path(args.out_dir)
    written = []
    if args.window_id:
        for w in args.window_id:
            written.extend(_window_figures(ckpt, data, data.tensors.index_of(w), sampler, out_dir))
    else:
        written.extend(_evaluation_figures(ckpt, data, sampler, out_dir))
    from .plotting import plot_training_curve, save_figure
    written.append(save_figure(plot_training_curve(ckpt.log, title=f"{ckpt.model_name}, {ckpt.t_pred} frames"),
                               out_dir / f"training_h{ckpt.t_pred}.png"))
    for p in written:
        print(f"figure {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatsbi", description="Bicycle trajectory forecasting on circular tracks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write seeded circular-track scenes as CSV")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--agents", type=int, default=None)
    p.add_argument("--duration", type=float, default=None, help="recorded seconds per scene")
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--warmup", type=float, default=None)
    p.add_argument("--sigma-obs", dest="sigma_obs", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    def data_args(p):
        p.add_argument("--data", required=True, help="trajectory CSV (scene_id,agent_id,frame,x,y)")
        p.add_argument("--fps", type=float, default=None)

    p = sub.add_parser("train", help="train one model per horizon and report held-out metrics")
    p.add_argument("--config", default=None)
    data_args(p)
    p.add_argument("--checkpoint", required=True, help="output path; _h<horizon> is added for several horizons")
    p.add_argument("--metrics", default=None, help="metrics CSV output path")
    p.add_argument("--model", choices=["gatsbi", "physics_module", "social_module"], default=None)
    p.add_argument("--horizon", type=int, nargs="+", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--folds", type=int, nargs="+", default=None)
    p.add_argument("--ablation", nargs="+", default=None,
                   help="unimodal, no_anticipation, no_decay, star_connected")
    p.add_argument("--baselines", action="store_true", help="add the four physics baselines to the table")
    p.add_argument("--figures", default=None, help="directory for training-curve figures")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="held-out ADE/FDE of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    data_args(p)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--sampler", choices=["expected", "most_probable", "best_mode"], default=None)
    p.add_argument("--label", default=None)
    p.add_argument("--metrics", default=None)
    p.add_argument("--baselines", action="store_true")
    p.add_argument("--figures", default=None, help="directory for scene, density and error figures")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="forecasts (and mixture parameters) for windows as JSON")
    p.add_argument("--checkpoint", required=True)
    data_args(p)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--window-id", nargs="+", default=None, help="scene:agent:reference_frame")
    p.add_argument("--limit", type=int, default=1, help="windows to emit when no id is given")
    p.add_argument("--sampler", choices=["expected", "most_probable", "best_mode"], default=None)
    p.add_argument("--emit-attention", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plot", help="render scene, uncertainty, error and training figures")
    p.add_argument("--checkpoint", required=True)
    data_args(p)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--window-id", nargs="+", default=None)
    p.add_argument("--sampler", choices=["expected", "most_probable", "best_mode"], default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (GatsbiError, FileNotFoundError, KeyError) as exc:
        print(f"gatsbi {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
