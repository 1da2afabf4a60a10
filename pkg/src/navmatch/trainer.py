"""Masked node generation training: sample construction, Adam loop, evaluation."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import modelfile
from .euler import CLS, PAD, cyclic_reindex, euler_path, eulerize
from .graph import LabeledGraph, component_of, random_walk_sample
from .model import ModelConfig, NavigatorModel, pad_sequences

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,mean_loss,lr,top1,mrr,seconds"
LOG_EPS = 1e-12
TRAIN_PROFILES = {"paper": dict(batch_size=128), "desk": dict(batch_size=16)}


class TrainingDiverged(RuntimeError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass
class TrainingConfig:
    epochs: int = 1000
    batch_size: int = 128
    learning_rate: float = 5e-4
    lr_decay: float = 0.999
    walk_min: int = 5
    walk_max: int = 19
    mask_ratio: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0
    holdout_fraction: float = 0.1
    freeze_extractor: bool = False

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if not 1 <= self.walk_min <= self.walk_max:
            raise ValueError("need 1 <= walk_min <= walk_max")
        if not 0 < self.mask_ratio <= 1:
            raise ValueError("mask_ratio must be in (0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate of zero-based ``epoch``."""
        return self.learning_rate * self.lr_decay**epoch


@dataclass
class TrainingSample:
    tokens: np.ndarray
    positions: np.ndarray
    query: LabeledGraph
    target: int
    anchor: int
    origin: list = field(default_factory=list)
    target_query_vertex: int = 0
    nodes: tuple = ()


# -- samples ----------------------------------------------------------------


def component_sizes(g: LabeledGraph) -> list[int]:
    size = [0] * g.vertex_count
    for v in range(g.vertex_count):
        if size[v] == 0:
            comp = component_of(g, v)
            for w in comp:
                size[w] = len(comp)
    return size


def mask_tokens(nodes, origin, masked, target_u) -> np.ndarray:
    """Target occurrences become CLS, other masked vertices PAD, the rest their data ids."""
    masked = set(int(x) for x in masked)
    tokens = np.empty(len(nodes), dtype=np.int64)
    for i, u in enumerate(nodes):
        if u == target_u:
            tokens[i] = CLS
        elif u in masked:
            tokens[i] = PAD
        else:
            tokens[i] = origin[u]
    return tokens


def make_sample(g, anchor, size, cfg: TrainingConfig, rng, window) -> TrainingSample:
    q, origin = random_walk_sample(g, anchor, size, rng)
    path = cyclic_reindex(euler_path(eulerize(q)), int(rng.integers(window)), window)
    nq = q.vertex_count
    kmax = max(1, math.ceil(cfg.mask_ratio * nq))
    k = int(rng.integers(1, kmax + 1))
    masked = rng.choice(nq, size=k, replace=False)
    target_u = int(masked[rng.integers(k)])
    tokens = mask_tokens(path.nodes, origin, masked, target_u)
    return TrainingSample(
        tokens, np.asarray(path.position_ids, dtype=np.int64), q, origin[target_u], anchor, origin, target_u, path.nodes
    )


def generate_epoch_samples(g: LabeledGraph, cfg: TrainingConfig, rng: np.random.Generator, window: int = 64,
                           anchors=None, sizes=None):
    """One sample per anchor vertex (all vertices by default), in the given anchor order."""
    if g.vertex_count == 0:
        raise ValueError("data graph is empty")
    sizes = component_sizes(g) if sizes is None else sizes
    anchors = range(g.vertex_count) if anchors is None else anchors
    for v in anchors:
        s = int(rng.integers(cfg.walk_min, cfg.walk_max + 1))
        yield make_sample(g, int(v), min(s, sizes[v]), cfg, rng, window)


def holdout_mask(n: int, seed: int, fraction: float) -> np.ndarray:
    """Fixed pseudo-random split of vertex ids by a seeded hash."""
    out = np.zeros(n, dtype=bool)
    for v in range(n):
        h = hashlib.blake2b(f"{seed}:{v}".encode(), digest_size=8).digest()
        out[v] = int.from_bytes(h, "little") / 2**64 < fraction
    return out


# -- loss and metrics -------------------------------------------------------


def mng_loss(P, t: int) -> float:
    p = float(P[t])
    if p <= 0:
        log.warning("P_t = %g clamped to %g", p, LOG_EPS)
    return -math.log(max(p, LOG_EPS))


def ranking_metrics(P, targets) -> dict:
    """Top-1 accuracy and MRR; ties rank the smaller vertex id first."""
    P = np.asarray(P)
    targets = np.asarray(targets)
    if len(targets) == 0:
        raise EvaluationError("no samples to evaluate")
    idx = np.arange(P.shape[1])
    pt = P[np.arange(len(targets)), targets][:, None]
    better = (P > pt) | ((P == pt) & (idx[None, :] < targets[:, None]))
    rank = 1 + better.sum(axis=1)
    return {"top1": float(np.mean(rank == 1)), "mrr": float(np.mean(1.0 / rank))}


def batch_arrays(samples):
    tokens, positions, lengths = pad_sequences([(s.tokens, s.positions) for s in samples])
    return [s.query for s in samples], tokens, positions, lengths, np.array([s.target for s in samples])


def predict(model: NavigatorModel, samples, chunk: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(samples), chunk):
        queries, tokens, positions, lengths, _ = batch_arrays(samples[i : i + chunk])
        sig = model.extract_forward(queries)[0]
        out.append(model.probabilities(tokens, positions, lengths, sig))
    return np.concatenate(out)


def evaluate(model: NavigatorModel, samples) -> dict:
    samples = list(samples)
    if not samples:
        raise EvaluationError("no held-out samples to evaluate")
    return ranking_metrics(predict(model, samples), [s.target for s in samples])


# -- optimisation -----------------------------------------------------------


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, skip=()):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            if name.startswith(skip) if skip else False:
                continue
            g = grads[name].astype(p.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> dict:
        out = {}
        for name in self.m:
            out[modelfile.OPTIMIZER_PREFIX + "m." + name] = self.m[name]
            out[modelfile.OPTIMIZER_PREFIX + "v." + name] = self.v[name]
        return out


class Trainer:
    def __init__(self, model: NavigatorModel, cfg: TrainingConfig):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.opt = Adam(model.params)
        self.skip = ("qs.",) if cfg.freeze_extractor else ()

    def run_epoch(self, samples, epoch: int, rng=None) -> float:
        """One pass over ``samples`` (shuffled by ``rng`` when given); returns the mean loss."""
        samples = list(samples)
        if rng is not None:
            samples = [samples[i] for i in rng.permutation(len(samples))]
        lr = self.cfg.lr_at(epoch)
        total = 0.0
        bs = self.cfg.batch_size
        for b, i in enumerate(range(0, len(samples), bs)):
            queries, tokens, positions, lengths, targets = batch_arrays(samples[i : i + bs])
            losses, grads = self.model.loss_and_grads(
                queries, tokens, positions, lengths, targets, train_extractor=not self.cfg.freeze_extractor
            )
            batch_loss = float(losses.sum())
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch + 1}, batch {b}")
            total += batch_loss
            self.opt.step(self.model.params, grads, lr, self.skip)
        return total / max(len(samples), 1)

    def checkpoint_bytes(self, epoch: int) -> bytes:
        return modelfile.model_bytes(
            self.model, {"epoch": epoch, "adam_step": self.opt.t}, self.opt.state_tensors()
        )


def format_log_row(row: dict) -> str:
    return (
        f"{row['epoch']},{row['mean_loss']:.6f},{row['lr']:.6g},{row['top1']:.6f},"
        f"{row['mrr']:.6f},{row['seconds']:.3f}"
    )


def train(g: LabeledGraph, cfg: TrainingConfig, model_config: ModelConfig | None = None, model=None,
          log_path=None, checkpoint_dir=None, on_epoch=None):
    """Train a navigator on ``g``; returns ``(model, log_rows)``.

    A fixed held-out set (one sample per held-out anchor) is scored after
    every epoch. The log CSV is rewritten after each epoch when ``log_path``
    is given.
    """
    cfg.validate()
    if model is None:
        if model_config is None:
            model_config = ModelConfig.from_profile("desk", g.vertex_count, max(g.labels) + 1)
        model = NavigatorModel.initialize(model_config, seed=cfg.seed)
    window = model.config.window
    rng = np.random.default_rng(cfg.seed)
    held = holdout_mask(g.vertex_count, cfg.seed, cfg.holdout_fraction)
    train_anchors = np.flatnonzero(~held)
    sizes = component_sizes(g)
    eval_rng = np.random.default_rng([cfg.seed, 1])
    held_out = list(generate_epoch_samples(g, cfg, eval_rng, window, np.flatnonzero(held), sizes))
    trainer = Trainer(model, cfg)
    rows = []
    lines = [LOG_HEADER]
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = train_anchors[rng.permutation(len(train_anchors))]
        samples = list(generate_epoch_samples(g, cfg, rng, window, order, sizes))
        mean_loss = trainer.run_epoch(samples, epoch)
        metrics = evaluate(model, held_out) if held_out else {"top1": float("nan"), "mrr": float("nan")}
        row = {"epoch": epoch + 1, "mean_loss": mean_loss, "lr": cfg.lr_at(epoch), **metrics,
               "seconds": time.perf_counter() - t0}
        rows.append(row)
        lines.append(format_log_row(row))
        if log_path is not None:
            Path(log_path).write_text("\n".join(lines) + "\n")
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            d = Path(checkpoint_dir)
            d.mkdir(parents=True, exist_ok=True)
            (d / f"checkpoint_{epoch + 1:05d}.bin").write_bytes(trainer.checkpoint_bytes(epoch + 1))
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d loss %.4f top1 %.4f", epoch + 1, mean_loss, metrics["top1"])
    return model, rows
