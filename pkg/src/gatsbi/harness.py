"""Training, fold-wise evaluation, ablations and metric tables."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .data import FoldAssignment, Scene, split_folds, window_scenes
from .errors import ConfigurationError, InputError, NumericalError
from .model import GATsBi, WindowTensors, build_model, featurize
from .output import ade_loss, fde_loss, mixture_nll
from .physics import PREDICTORS

log = logging.getLogger(__name__)

METRICS_HEADER = ("model", "horizon_frames", "ade_mean", "ade_std", "fde_mean", "fde_std")

ABLATIONS = {
    "unimodal": {"output__mode": "unimodal"},
    "no_anticipation": {"social__anticipation": "off"},
    "no_decay": {"social__decay": "off"},
    "star_connected": {"social__topology": "star"},
}


def metric_ade(pred, truth) -> float:
    return float(ade_loss(np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)))


def metric_fde(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.size == 0 or truth.size == 0:
        raise InputError("FDE needs non-empty trajectories")
    return float(fde_loss(pred, truth))


@dataclass
class MetricsRow:
    model: str
    horizon: int
    ade_mean: float
    ade_std: float
    fde_mean: float
    fde_std: float

    @classmethod
    def from_folds(cls, model: str, horizon: int, fold_ade, fold_fde) -> "MetricsRow":
        """Mean and population std of per-fold mean errors."""
        ade = np.asarray(fold_ade, dtype=float)
        fde = np.asarray(fold_fde, dtype=float)
        return cls(model, int(horizon), float(ade.mean()), float(ade.std()), float(fde.mean()), float(fde.std()))

    def as_tuple(self):
        return (self.model, self.horizon, self.ade_mean, self.ade_std, self.fde_mean, self.fde_std)


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)

    def add(self, row: MetricsRow):
        self.rows.append(row)

    def extend(self, rows):
        self.rows.extend(rows)

    def get(self, model: str, horizon: int) -> MetricsRow:
        for row in self.rows:
            if row.model == model and row.horizon == horizon:
                return row
        raise KeyError((model, horizon))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in self.rows:
            writer.writerow([r.model, r.horizon] + [f"{v:.6f}" for v in (r.ade_mean, r.ade_std, r.fde_mean, r.fde_std)])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path) -> "MetricsTable":
        table = cls()
        with open(path, encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                table.add(MetricsRow(rec["model"], int(rec["horizon_frames"]), float(rec["ade_mean"]),
                                     float(rec["ade_std"]), float(rec["fde_mean"]), float(rec["fde_std"])))
        return table

    def render(self) -> str:
        lines = [f"{'model':<22}{'horizon':>8}{'ADE':>18}{'FDE':>18}"]
        for r in self.rows:
            lines.append(f"{r.model:<22}{r.horizon:>8}{r.ade_mean:>10.4f} [{r.ade_std:.4f}]"
                         f"{r.fde_mean:>10.4f} [{r.fde_std:.4f}]")
        return "\n".join(lines)


@dataclass
class Dataset:
    """Featurised windows for one horizon together with their fold split."""

    tensors: WindowTensors
    folds: FoldAssignment
    horizon: int


def build_dataset(scenes: list[Scene], cfg: Config, horizon: int) -> Dataset:
    windows = window_scenes(scenes, cfg.dataset, t_pred=horizon)
    if not windows:
        raise ConfigurationError(f"no windows of length {cfg.dataset.t_obs + 1 + horizon} frames in the data")
    folds = split_folds(windows, cfg.dataset.k_folds, cfg.dataset.seed)
    return Dataset(featurize(windows, cfg), folds, horizon)


@dataclass
class Checkpoint:
    """Selected per-fold parameters plus everything needed to rebuild them."""

    config: dict
    model_name: str
    t_obs: int
    t_pred: int
    folds: list
    scene_fold: dict
    selected_epoch: int
    states: dict
    log: list

    def model(self, fold: int) -> GATsBi:
        cfg = Config.from_dict(self.config)
        model = GATsBi(cfg, self.t_obs, self.t_pred)
        model.load_state_dict(self.states[fold])
        model.eval()
        return model

    def save(self, path):
        torch.save(self.__dict__, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(**torch.load(path, weights_only=False))

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for fold in sorted(self.states):
            for name, tensor in sorted(self.states[fold].items()):
                h.update(name.encode())
                h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def _loss_name(cfg: Config) -> str:
    if cfg.train.loss:
        return cfg.train.loss
    return "mixture_nll" if cfg.output.mode == "multimodal" else "ade"


def _loss(model: GATsBi, batch: dict, loss_name: str) -> torch.Tensor:
    out = model(batch)
    if loss_name == "mixture_nll":
        if "mixture" not in out:
            raise ConfigurationError("mixture_nll loss requires multimodal output")
        return mixture_nll(out["mixture"], batch["ego_fut"])
    pred = out["trajectory"] if "trajectory" in out else model.predict(batch, "expected")
    return ade_loss(pred, batch["ego_fut"]).mean()


@torch.no_grad()
def predict_windows(model: GATsBi, tensors: WindowTensors, idx=None, sampler: str = "expected",
                    batch_size: int = 256) -> np.ndarray:
    model.eval()
    idx = np.arange(len(tensors)) if idx is None else np.asarray(idx)
    preds = []
    for start in range(0, len(idx), batch_size):
        batch = tensors.batch(idx[start:start + batch_size])
        truth = batch["ego_fut"] if sampler == "best_mode" else None
        preds.append(model.predict(batch, sampler, truth).double().numpy())
    return np.concatenate(preds) if preds else np.zeros((0, tensors.t_pred, 2))


def train(model_cfg: Config, data: Dataset, cfg=None, folds=None) -> Checkpoint:
    """Train one model per fold, all folds in lock-step.

    After every epoch each fold's model is scored on its held-out scenes;
    the epoch with the lowest mean validation ADE across folds is kept.
    ``cfg`` overrides ``model_cfg.train`` when given.
    """
    tcfg = cfg or model_cfg.train
    folds = list(folds if folds is not None else (tcfg.folds if tcfg.folds is not None else range(data.folds.k)))
    if not folds:
        raise ConfigurationError("need at least one fold")
    loss_name = _loss_name(model_cfg)
    tensors = data.tensors
    sampler = model_cfg.output.sampler if model_cfg.output.sampler != "best_mode" else "expected"

    torch.use_deterministic_algorithms(True)
    runs = {}
    for fold in folds:
        model = build_model(model_cfg, tensors.t_obs, tensors.t_pred, seed=tcfg.seed * 1000 + fold)
        runs[fold] = dict(
            model=model,
            opt=torch.optim.Adam(model.parameters(), lr=tcfg.learning_rate),
            rng=np.random.default_rng([tcfg.seed, fold]),
            train_idx=data.folds.train_indices(fold),
            test_idx=data.folds.test_indices(fold),
        )
        if len(runs[fold]["test_idx"]) == 0 or len(runs[fold]["train_idx"]) == 0:
            raise ConfigurationError(f"fold {fold} has an empty train or test split")

    history = []
    best = (math.inf, -1, None)
    for epoch in range(1, tcfg.epochs + 1):
        record = {"epoch": epoch, "train_loss": {}, "val_ade": {}}
        for fold, run in runs.items():
            model, opt = run["model"], run["opt"]
            model.train()
            order = run["rng"].permutation(run["train_idx"])
            total, count = 0.0, 0
            for start in range(0, len(order), tcfg.batch_size):
                batch_idx = order[start:start + tcfg.batch_size]
                batch = tensors.batch(batch_idx)
                # dropout draws depend only on this fold's stream
                torch.manual_seed(int(run["rng"].integers(2**62)))
                loss = _loss(model, batch, loss_name)
                if not torch.isfinite(loss):
                    raise NumericalError(
                        f"non-finite {loss_name} loss at epoch {epoch}, fold {fold}, batch starting {start}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(batch_idx)
                count += len(batch_idx)
            record["train_loss"][fold] = total / count
            pred = predict_windows(model, tensors, run["test_idx"], sampler)
            record["val_ade"][fold] = float(ade_loss(pred, tensors.ego_fut[run["test_idx"]]).mean())
        mean_val = float(np.mean(list(record["val_ade"].values())))
        record["mean_val_ade"] = mean_val
        history.append(record)
        log.info("epoch %d loss %s val ADE %.4f", epoch,
                 {f: round(v, 4) for f, v in record["train_loss"].items()}, mean_val)
        if mean_val < best[0]:
            best = (mean_val, epoch, {f: copy.deepcopy(r["model"].state_dict()) for f, r in runs.items()})

    return Checkpoint(
        config=model_cfg.to_dict(),
        model_name=model_cfg.model.name,
        t_obs=tensors.t_obs,
        t_pred=tensors.t_pred,
        folds=folds,
        scene_fold=dict(data.folds.scene_fold),
        selected_epoch=best[1],
        states=best[2],
        log=history,
    )


def fold_errors(pred: np.ndarray, tensors: WindowTensors, idx) -> tuple[np.ndarray, np.ndarray]:
    truth = tensors.ego_fut[idx]
    return ade_loss(pred, truth), fde_loss(pred, truth)


def evaluate(checkpoint: Checkpoint, data: Dataset, folds=None, sampler: str | None = None,
             label: str | None = None) -> MetricsRow:
    """ADE/FDE on each fold's held-out scenes, aggregated across folds."""
    cfg = Config.from_dict(checkpoint.config)
    sampler = sampler or cfg.output.sampler
    if sampler not in ("expected", "most_probable", "best_mode"):
        raise ConfigurationError(f"unknown sampler {sampler!r}")
    if data.horizon != checkpoint.t_pred:
        raise ConfigurationError(f"checkpoint predicts {checkpoint.t_pred} frames, data has {data.horizon}")
    if sampler == "best_mode" and data.tensors.ego_fut.size == 0:
        raise ConfigurationError("best_mode sampling needs ground-truth futures")
    folds = list(folds if folds is not None else checkpoint.folds)
    fold_ade, fold_fde = [], []
    for fold in folds:
        if fold not in checkpoint.states:
            raise ConfigurationError(f"checkpoint has no parameters for fold {fold}")
        idx = _test_indices(checkpoint, data, fold)
        pred = predict_windows(checkpoint.model(fold), data.tensors, idx, sampler)
        ade, fde = fold_errors(pred, data.tensors, idx)
        fold_ade.append(ade.mean())
        fold_fde.append(fde.mean())
    return MetricsRow.from_folds(label or checkpoint.model_name, data.horizon, fold_ade, fold_fde)


def _test_indices(checkpoint: Checkpoint, data: Dataset, fold: int) -> np.ndarray:
    """Windows whose scene was held out for ``fold`` when the checkpoint was trained."""
    scene_fold = checkpoint.scene_fold
    return np.array([i for i, s in enumerate(data.tensors.scene_ids) if scene_fold.get(s) == fold], dtype=np.int64)


def evaluate_predictor(predict, data: Dataset, folds, label: str) -> MetricsRow:
    """Evaluate any callable ``predict(tensors_subset) -> (n, Tp, 2)`` over folds."""
    fold_ade, fold_fde = [], []
    for fold in folds:
        idx = data.folds.test_indices(fold)
        sub = data.tensors.subset(idx)
        pred = np.asarray(predict(sub), dtype=float)
        ade, fde = fold_errors(pred, data.tensors, idx)
        fold_ade.append(ade.mean())
        fold_fde.append(fde.mean())
    return MetricsRow.from_folds(label, data.horizon, fold_ade, fold_fde)


def evaluate_baselines(data: Dataset, folds=None) -> list[MetricsRow]:
    folds = list(folds if folds is not None else range(data.folds.k))
    return [evaluate_predictor(lambda t, m=m: t.physics[:, m], data, folds, name)
            for m, name in enumerate(PREDICTORS)]


def normalize_variant(name: str) -> str:
    key = name.strip().lower().replace("-", "_").replace(" ", "_")
    if key == "star":
        key = "star_connected"
    if key not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return key


def ablation_config(variant, cfg: Config) -> Config:
    """Config with the switches of one or more ablation variants applied."""
    variants = [variant] if isinstance(variant, str) else list(variant)
    overrides = {}
    for v in variants:
        overrides.update(ABLATIONS[normalize_variant(v)])
    out = cfg.replace(**overrides)
    if "output__mode" in overrides:
        out = out.replace(train__loss=None)
    return out


def run_ablation(variant, data: Dataset, cfg: Config, folds=None) -> tuple[MetricsTable, Checkpoint]:
    vcfg = ablation_config(variant, cfg)
    ckpt = train(vcfg, data, folds=folds)
    label = variant if isinstance(variant, str) else "+".join(variant)
    table = MetricsTable([evaluate(ckpt, data, label=normalize_variant(label) if isinstance(variant, str) else label)])
    return table, ckpt


def scenes_to_datasets(scenes, cfg: Config, horizons=None) -> dict[int, Dataset]:
    return {h: build_dataset(scenes, cfg, h) for h in (horizons or cfg.dataset.horizons)}
