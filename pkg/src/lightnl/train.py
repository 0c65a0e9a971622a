"""Training and evaluation loops; SGD with momentum; history/checkpoints.

All stochasticity is derived from the config seed: weight init, batch
shuffling and any dataset generation. Two runs with identical (seed,
config, data) produce identical histories.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import cost, nas_search, serialization
from . import tensor as T


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 0.05
    lr_decay: float = 0.97  # per epoch
    momentum: float = 0.9
    lam: float = 0.0
    seed: int = 1
    mode: str = "plain"  # plain | lightnl | search | realized
    threshold_lr_mult: float = 10.0
    clip_grad_norm: float = 10.0  # 0 disables clipping

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs/batch_size/lr must be non-negative/positive")


class SGD:
    """Momentum SGD over parameter groups with per-group learning-rate scale."""

    def __init__(self, groups, lr, momentum=0.9, clip_grad_norm=0.0):
        # groups: list of (params, lr_scale)
        self.groups = [(list(params), scale) for params, scale in groups]
        self.lr = lr
        self.momentum = momentum
        self.clip_grad_norm = clip_grad_norm
        self._velocity = {}

    def _clip(self):
        if not self.clip_grad_norm:
            return
        sq = 0.0
        for params, _ in self.groups:
            for p in params:
                if p.grad is not None:
                    sq += float(np.sum(p.grad ** 2))
        norm = math.sqrt(sq)
        if norm > self.clip_grad_norm:
            factor = self.clip_grad_norm / norm
            for params, _ in self.groups:
                for p in params:
                    if p.grad is not None:
                        p.grad *= factor

    def step(self):
        self._clip()
        for params, scale in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                v = self._velocity.get(id(p))
                if v is None:
                    v = np.zeros_like(p.data)
                    self._velocity[id(p)] = v
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * scale * v


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def _to_float(images):
    return images.astype(np.float64) / 255.0


def evaluate(model, dataset, batch_size=256, search_state=None):
    """Deterministic top-1 and mean cross-entropy; no parameter mutation."""
    correct = 0
    total_ce = 0.0
    n = len(dataset)
    with T.no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            x = _to_float(dataset.images[sl])
            labels = dataset.labels[sl]
            logits = model.forward(x, mode="eval", search_state=search_state)
            ce = T.softmax_cross_entropy(logits, labels)
            total_ce += float(ce.data) * (sl.stop - sl.start)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
    return {"top1": correct / n, "ce": total_ce / n}


def train(model, dataset, cfg, search_state=None, eval_dataset=None,
          checkpoint_path=None, checkpoint_every=0):
    """Run the training loop; returns per-epoch history rows.

    In search mode each step performs the hard forward / relaxed backward
    update of both weights and thresholds; otherwise the loss is plain
    cross-entropy.
    """
    rng = np.random.default_rng(cfg.seed)
    groups = [(model.weights(), 1.0)]
    if search_state is not None:
        search_state.lam = cfg.lam
        groups.append((search_state.thresholds(), cfg.threshold_lr_mult))
    opt = SGD(groups, lr=cfg.lr, momentum=cfg.momentum,
              clip_grad_norm=cfg.clip_grad_norm)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * (cfg.lr_decay ** epoch)
        losses = []
        correct = 0
        seen = 0
        flops_expected = float(model.flops_report().total) \
            if search_state is None else None
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            x = _to_float(dataset.images[idx])
            labels = dataset.labels[idx]
            if search_state is not None:
                metrics = nas_search.search_step(model, (x, labels), search_state, opt)
                loss_val = metrics["loss"]
                flops_expected = metrics["expected_cost"]
                logits_data = metrics["logits"]
            else:
                model.zero_grad()
                logits = model.forward(x, mode="train")
                loss = T.softmax_cross_entropy(logits, labels)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}: {loss_val!r}")
                T.backward(loss)
                opt.step()
                logits_data = logits.data
            losses.append(loss_val)
            correct += int(np.sum(np.argmax(logits_data, axis=1) == labels))
            seen += len(labels)
        row = {
            "epoch": epoch,
            "split": "train",
            "loss": float(np.mean(losses)) if losses else 0.0,
            "top1": correct / seen if seen else 0.0,
            "flops_expected": flops_expected,
        }
        history.append(row)
        if eval_dataset is not None:
            ev = evaluate(model, eval_dataset, search_state=search_state)
            history.append({
                "epoch": epoch,
                "split": "eval",
                "loss": ev["ce"],
                "top1": ev["top1"],
                "flops_expected": flops_expected,
            })
        if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path)
    if checkpoint_path and not checkpoint_every:
        save_checkpoint(model, checkpoint_path)
    return history


def save_checkpoint(model, path):
    serialization.save_checkpoint(path, model.state_dict())


def load_checkpoint(model, path):
    model.load_state_dict(serialization.load_checkpoint(path))


HISTORY_FIELDS = ["epoch", "split", "loss", "top1", "flops_expected"]


def history_to_csv(history, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k) for k in HISTORY_FIELDS})
