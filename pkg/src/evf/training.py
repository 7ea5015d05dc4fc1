"""
Meta-training of the video model.

One step samples `meta_batch_objects` objects, draws a support set and disjoint target
trajectories from each object's dataset, averages the per-object losses and applies a
single Adam update to all parameters.
"""

import logging
import time
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from .autodiff import adam_step
from .model import Batch, ModelConfig, SupportSet, VisualForesight, flatten_frames
from .pushworld import load_split
from .utils import atomic_write, timing

logger = logging.getLogger("evf.training")
logger.addHandler(logging.NullHandler())

MAX_SUPPORT_SIZE = 5
LOG_COLUMNS = ["step", "recon", "z_kl", "c_kl", "loss", "wall_ms"]
CHECKPOINT_NAME = "model.evfp"
LOG_NAME = "train_log.csv"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    meta_batch_objects: int = 4
    trajectories_per_object: int = 4
    support_size: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = None
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 100
    baseline_mode: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0, got %r" % self.steps)
        if not 1 <= self.support_size <= MAX_SUPPORT_SIZE:
            raise ValueError("support_size must be in [1, %d], got %r" % (
                MAX_SUPPORT_SIZE, self.support_size))
        if self.meta_batch_objects < 1 or self.trajectories_per_object < 1:
            raise ValueError("meta_batch_objects and trajectories_per_object must be >= 1")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be >= 1")

    @classmethod
    def from_settings(cls, settings):
        """build from flat settings (`train.*` keys and `seed`)"""
        names = {f.name for f in fields(cls)}
        values = {k[len("train."):]: v for k, v in settings.items() if k.startswith("train.")}
        values = {k: v for k, v in values.items() if k in names}
        if "seed" in settings:
            values["seed"] = settings["seed"]
        return cls(**values)


class TrainResult(NamedTuple):
    model: VisualForesight
    checkpoint: Path
    log_path: Path
    log: pd.DataFrame


def sample_support_indices(n, M, rng, exclude=()):
    """
    `min(M, available)` distinct trajectory indices of `range(n)`, avoiding `exclude`.

    A warning is issued when fewer than `M` trajectories are available.
    """
    available = np.setdiff1d(np.arange(n), np.asarray(list(exclude), dtype=int))
    if len(available) == 0:
        raise TrainingError("no trajectory available for a support set (N=%d)" % n)
    if len(available) < M:
        msg = "only %d trajectories available for a support set of %d" % (len(available), M)
        warnings.warn(msg)
        logger.warning(msg)
    return np.sort(rng.choice(available, size=min(M, len(available)), replace=False))


def sample_support_set(dataset, M, rng, exclude=()):
    """
    Sample a support set of one object's dataset, without replacement.

    Parameters
    ----------
    dataset: evf.pushworld.DatasetFile
    M: int
        requested size; all `N` trajectories are used (with a warning) if `N < M`.
    rng: numpy.random.Generator
    exclude: iterable of int
        trajectory indices not to use.

    Returns
    -------
    evf.model.SupportSet
        frames only, actions are not part of a support set.
    """
    if dataset.N == 0:
        raise TrainingError("empty dataset for object %d" % dataset.object_id)
    indices = sample_support_indices(dataset.N, M, rng, exclude)
    return SupportSet(flatten_frames(dataset.frames[indices]), dataset.object_id)


def _split_object(dataset, cfg, rng):
    """support and target indices, disjoint whenever N >= M + b"""
    n = dataset.N
    M, b = cfg.support_size, cfg.trajectories_per_object
    if n >= M + b:
        order = rng.permutation(n)
        return np.sort(order[:M]), np.sort(order[M:M + b])
    support = sample_support_indices(n, M, rng)
    rest = np.setdiff1d(np.arange(n), support)
    pool = rest if len(rest) else np.arange(n)
    targets = np.sort(rng.choice(pool, size=min(b, len(pool)), replace=False))
    return support, targets


def train_step(model, datasets, cfg, rng):
    """
    One meta-training step.

    Parameters
    ----------
    model: VisualForesight
        updated in place.
    datasets: list of evf.pushworld.DatasetFile
    cfg: TrainConfig
    rng: numpy.random.Generator

    Returns
    -------
    dict
        means over the sampled objects of `recon`, `z_kl`, `c_kl`, `c_term` and `loss`,
        plus the sampled `objects` and the `support`/`targets` indices per object.
    """
    B = cfg.meta_batch_objects
    if len(datasets) < B:
        raise TrainingError("%d datasets available, meta batch needs %d" % (len(datasets), B))
    chosen = np.sort(rng.choice(len(datasets), size=B, replace=False))
    totals = dict.fromkeys(("recon", "z_kl", "c_kl", "c_term", "loss"), 0.0)
    grads = {}
    supports, targets = [], []
    for k in chosen:
        dataset = datasets[k]
        support_idx, target_idx = _split_object(dataset, cfg, rng)
        support = SupportSet(flatten_frames(dataset.frames[support_idx]), dataset.object_id)
        batch = Batch(flatten_frames(dataset.frames[target_idx]), dataset.actions[target_idx],
                      dataset.object_id)
        g, loss, diagnostics = model.loss(support, batch, dataset.N, rng)
        for name, grad in g.backward(loss).items():
            grads[name] = grad / B if name not in grads else grads[name] + grad / B
        for key in totals:
            totals[key] += float(diagnostics[key].value) / B
        supports.append(support_idx)
        targets.append(target_idx)
    adam_step(model.store, grads, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
              clip_norm=cfg.clip_norm)
    return dict(totals, objects=chosen, support=supports, targets=targets)


def load_train_datasets(manifest):
    """read every train dataset of `manifest` before training starts"""
    try:
        return load_split(manifest, "train")
    except (OSError, ValueError) as e:
        raise TrainingError("cannot read training data of %s: %s" % (manifest, e)) from e


def _read_log(path, upto):
    if not path.exists():
        return []
    log = pd.read_csv(path, float_precision="round_trip")
    return log[log["step"] <= upto].to_dict("records")


def _write_log(path, rows):
    with atomic_write(path, "w") as f:
        pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(f, index=False)


@timing
def train_loop(cfg, manifest, out_dir, model_config=None, resume=False):
    """
    Train a model on the train split of `manifest`.

    Step `s` draws from `numpy.random.default_rng([cfg.seed, s])`, so a resumed run gives
    the same loss trace as an uninterrupted one.

    Parameters
    ----------
    cfg: TrainConfig
    manifest: str or pathlib.Path
    out_dir: str or pathlib.Path
        receives `model.evfp` (with `.opt` and `.cfg`) and `train_log.csv`.
    model_config: ModelConfig or None
        `use_context` is overridden by `cfg.baseline_mode`.
    resume: bool
        continue from the checkpoint in `out_dir` if there is one.

    Returns
    -------
    TrainResult
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / CHECKPOINT_NAME
    log_path = out_dir / LOG_NAME
    datasets = load_train_datasets(manifest)
    if len(datasets) < cfg.meta_batch_objects:
        raise TrainingError("%s has %d train datasets, meta batch needs %d" % (
            manifest, len(datasets), cfg.meta_batch_objects))

    if resume and checkpoint.exists():
        model = VisualForesight.load(checkpoint)
        if model.config.use_context == cfg.baseline_mode:
            raise TrainingError("%s was not trained with baseline_mode=%s" % (
                checkpoint, cfg.baseline_mode))
        rows = _read_log(log_path, model.store.step)
        logger.info("resuming %s at step %d", checkpoint, model.store.step)
    else:
        config = ModelConfig() if model_config is None else model_config
        config = ModelConfig(**dict(config.to_settings(), use_context=not cfg.baseline_mode))
        model = VisualForesight(config, seed=cfg.seed)
        rows = []
        model.save(checkpoint)

    while model.store.step < cfg.steps:
        step = model.store.step
        start = time.perf_counter()
        diag = train_step(model, datasets, cfg, np.random.default_rng([cfg.seed, step]))
        wall_ms = (time.perf_counter() - start) * 1000
        rows.append(dict(step=model.store.step, recon=diag["recon"], z_kl=diag["z_kl"],
                         c_kl=diag["c_kl"], loss=diag["loss"], wall_ms=round(wall_ms, 3)))
        if model.store.step % cfg.log_every == 0:
            logger.info("step %d: recon %.4f, Z %.4f, C %.4f, loss %.4f", model.store.step,
                        diag["recon"], diag["z_kl"], diag["c_kl"], diag["loss"])
        if model.store.step % cfg.checkpoint_every == 0:
            model.save(checkpoint)
            _write_log(log_path, rows)

    model.save(checkpoint)
    _write_log(log_path, rows)
    return TrainResult(model, checkpoint, log_path, pd.DataFrame(rows, columns=LOG_COLUMNS))
