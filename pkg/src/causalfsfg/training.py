"""Episodic meta-training, evaluation with confidence intervals, and ablations."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, fingerprint, to_dict
from .data import ClassSplit, Dataset, sample_episode
from .metric import episode_accuracy, episode_loss
from .model import CausalFSFG, build_model, calibrate_projections

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
ABLATION_ROWS = ((False, False), (True, False), (False, True), (True, True))


class NumericalError(RuntimeError):
    pass


@dataclass
class EvalReport:
    mean_accuracy: float  # percent
    ci95_halfwidth: float  # percent
    n_episodes: int
    config_fingerprint: str = ""
    accuracies: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {"mean_accuracy": self.mean_accuracy, "ci95_halfwidth": self.ci95_halfwidth,
                "n_episodes": self.n_episodes, "config_fingerprint": self.config_fingerprint}

    def __str__(self):
        return f"{self.mean_accuracy:.2f} +- {self.ci95_halfwidth:.2f} (n={self.n_episodes})"


@dataclass
class TrainResult:
    model: CausalFSFG
    velocity: list
    log: list
    episode_indices: list
    best_val: float | None
    best_epoch: int | None


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step decay: lr0 / factor ** (epoch // decay_epoch)."""
    return config.lr / config.decay_factor ** (epoch // config.decay_epoch)


@torch.no_grad()
def sgd_step(params, grads, velocity, lr: float, momentum: float = 0.9,
             weight_decay: float = 3e-4):
    """Nesterov SGD, in place:

        g <- grad + wd * p;  v <- mu * v + g;  p <- p - lr * (g + mu * v)
    """
    if not len(params) == len(grads) == len(velocity):
        raise ValueError("params, grads and velocity differ in length")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch {tuple(p.shape)}/{tuple(g.shape)}/{tuple(v.shape)}")
        g = g + weight_decay * p
        v.mul_(momentum).add_(g)
        p.sub_(lr * (g + momentum * v))
    return params, velocity


def summarize_accuracies(accuracies, fp: str = "") -> EvalReport:
    """Mean and 1.96 * sample std / sqrt(n), both in percent.  n = 1 gives halfwidth 0."""
    acc = np.asarray(accuracies, dtype=np.float64) * 100.0
    n = len(acc)
    if n == 0:
        raise ValueError("no accuracies to summarize")
    half = 0.0 if n == 1 else 1.96 * acc.std(ddof=1) / math.sqrt(n)
    return EvalReport(float(acc.mean()), float(half), n, fp, acc / 100.0)


def episode_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


@torch.no_grad()
def evaluate(model: CausalFSFG, dataset: Dataset, classes, n_episodes: int, n_way: int,
             k_shot: int, n_query: int, seed: int, config: TrainConfig | None = None,
             order=None) -> EvalReport:
    """Accuracy over independently seeded test episodes.

    Episode i always draws from its own stream (seed, i), so the report does
    not depend on ``order``.
    """
    was_training = model.training
    model.eval()
    aug = config.augment if config is not None else None
    accs = np.empty(n_episodes)
    for i in (range(n_episodes) if order is None else order):
        ep = sample_episode(dataset, classes, n_way, k_shot, n_query, episode_rng(seed, 1, i),
                            augment_mode="test", augment_config=aug)
        out = model.run_episode(ep)
        accs[i] = episode_accuracy(out.probs, ep.query_labels)
    model.train(was_training)
    return summarize_accuracies(accs, fingerprint(config) if config is not None else "")


def train(config: TrainConfig, dataset: Dataset, split: ClassSplit, out_dir=None,
          log_every: int = 0) -> TrainResult:
    config.validate()
    dtype = DTYPES[config.dtype]
    torch.manual_seed(config.seed)
    model = build_model(config.model, seed=config.seed, dtype=dtype)
    model.train()
    if config.model.proj_init == "calibrated":
        first = sample_episode(dataset, split.train, config.n_train, config.k_train,
                               config.u_train, episode_rng(config.seed, 0, 0, 0),
                               augment_mode="train", augment_config=config.augment)
        rms = calibrate_projections(model, torch.cat([first.support, first.query]))
        log.debug("projection calibration: feature rms %.4f", rms)
    params = [p for p in model.parameters()]
    velocity = [torch.zeros_like(p) for p in params]
    history, indices = [], []
    best_val, best_epoch, best_state = None, None, None
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w")

    try:
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config)
            for step in range(config.episodes_per_epoch):
                ep = sample_episode(dataset, split.train, config.n_train, config.k_train,
                                    config.u_train, episode_rng(config.seed, 0, epoch, step),
                                    augment_mode="train", augment_config=config.augment)
                indices.append(ep.indices())
                out = model.run_episode(ep)
                loss = episode_loss(out.probs, ep.query_labels)
                if not torch.isfinite(loss):
                    _dump_failure(out_dir, epoch, step, ep, loss)
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} episode {step}, classes {ep.origin_classes}")
                model.zero_grad(set_to_none=False)
                loss.backward()
                grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in params]
                sgd_step(params, grads, velocity, lr,
                         config.momentum, config.weight_decay)
                rec = {"epoch": epoch, "episode": step, "loss": loss.item(),
                       "accuracy": episode_accuracy(out.probs.detach(), ep.query_labels), "lr": lr}
                history.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
            if log_every and (epoch + 1) % log_every == 0:
                recent = history[-config.episodes_per_epoch:]
                log.info("epoch %d loss %.4f acc %.3f lr %g", epoch,
                         np.mean([r["loss"] for r in recent]),
                         np.mean([r["accuracy"] for r in recent]), lr)
            last = epoch == config.epochs - 1
            if split.val and ((epoch + 1) % config.val_every == 0 or last):
                rep = evaluate(model, dataset, split.val, config.val_episodes, config.n_test,
                               config.k_test, config.u_test, config.seed + 1, config)
                if log_file:
                    log_file.write(json.dumps({"epoch": epoch, "val_accuracy": rep.mean_accuracy}) + "\n")
                if best_val is None or rep.mean_accuracy > best_val:
                    best_val, best_epoch = rep.mean_accuracy, epoch
                    best_state = (copy.deepcopy(model.state_dict()), [v.clone() for v in velocity])
    finally:
        if log_file:
            log_file.close()

    if best_state is not None:
        model.load_state_dict(best_state[0])
        velocity = best_state[1]
    model.eval()
    return TrainResult(model, velocity, history, indices, best_val, best_epoch)


def _dump_failure(out_dir, epoch, step, ep, loss):
    if out_dir is None:
        return
    dump = {"epoch": epoch, "episode": step, "loss": float(loss),
            "origin_classes": list(ep.origin_classes),
            "support_indices": ep.support_indices.tolist(),
            "query_indices": ep.query_indices.tolist()}
    (Path(out_dir) / "nonfinite_episode.json").write_text(json.dumps(dump, indent=2))


def run_ablation(config: TrainConfig, dataset: Dataset, split: ClassSplit, out_dir=None):
    """Train and test the four (use_imse, use_imfr) combinations with identical seeds."""
    rows = []
    for use_imse, use_imfr in ABLATION_ROWS:
        cfg = dataclasses.replace(
            config, model=dataclasses.replace(config.model, use_imse=use_imse, use_imfr=use_imfr))
        sub = None
        if out_dir is not None:
            sub = Path(out_dir) / f"imse{int(use_imse)}_imfr{int(use_imfr)}"
        result = train(cfg, dataset, split, sub)
        report = evaluate(result.model, dataset, split.test, cfg.eval_episodes, cfg.n_test,
                          cfg.k_test, cfg.u_test, cfg.seed + 2, cfg)
        log.info("ablation imse=%s imfr=%s: %s", use_imse, use_imfr, report)
        rows.append({"use_imse": use_imse, "use_imfr": use_imfr, "report": report,
                     "config": to_dict(cfg), "result": result})
    return rows
