"""Alternating first-order search loop, optimizers, schedules and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, NonFiniteLossError
from .harness.config import OptimizerConfig, ScheduleConfig, SearchConfig
from .harness.data import Dataset, batches, load_dataset, split_half, steps_per_epoch
from .regularizers import DistillConfig, DropBlockConfig, DropState, distill_loss, drop_schedule, lambda_schedule
from .searchspace import (CELL_TYPES, ArchParams, EvalNetwork, Genotype, NetworkSpec, SearchNetwork,
                          count_skip_connect, derive_genotype, sample_masks, subgraph_forward,
                          supernet_teacher_forward)
from .tensorcore import DTensor

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "tau", "lambda", "drop_prob",
                 "skip_count_normal", "skip_count_reduce", "seconds")


def cosine_lr(step: int, total: int, lr0: float = 0.025) -> float:
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total))


def tau_at(progress: float, start: float = 10.0, end: float = 1.0) -> float:
    return start - (start - end) * progress


class SGD:
    """Momentum SGD with L2 weight decay.

    Per parameter: ``d = grad + wd * p``; ``buf = d`` on first use, else
    ``buf = momentum * buf + d``; ``p -= lr * buf``.  Parameters whose grad
    is None (not reached by backward) are left untouched.
    """

    def __init__(self, params: list[DTensor], momentum: float = 0.9, weight_decay: float = 3e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            d = p.grad + self.weight_decay * p.data
            buf = self.buffers[i]
            buf = d.copy() if buf is None else self.momentum * buf + d
            self.buffers[i] = buf
            p.data -= (lr * buf).astype(p.dtype)


class Adam:
    """Adam with L2 weight decay added to the gradient before the moment updates."""

    def __init__(self, params: list[DTensor], lr: float = 3e-4, betas=(0.5, 0.999),
                 weight_decay: float = 1e-4, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.weight_decay, self.eps = lr, tuple(betas), weight_decay, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


@dataclass
class SearchState:
    net: SearchNetwork
    alpha: ArchParams
    sgd: SGD
    adam: Adam
    rng: np.random.Generator
    k: int
    total_steps: int
    step: int = 0
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dropblock: DropBlockConfig = field(default_factory=DropBlockConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    last_masks: dict = field(default_factory=dict)

    @property
    def progress(self) -> float:
        return self.step / self.total_steps

    def weights(self) -> list[DTensor]:
        return self.sgd.params


def init_search_state(spec: NetworkSpec, k: int, total_steps: int, seed: int,
                      optim: OptimizerConfig | None = None, schedule: ScheduleConfig | None = None,
                      dropblock: DropBlockConfig | None = None, distill: DistillConfig | None = None) -> SearchState:
    if not 1 <= k <= 8:
        raise ConfigurationError(f"K must lie in [1, 8], got {k}")
    optim = optim or OptimizerConfig()
    net = SearchNetwork(spec, np.random.default_rng([seed, 1]))
    alpha = ArchParams()
    return SearchState(
        net=net, alpha=alpha,
        sgd=SGD(net.parameters(), optim.w_momentum, optim.w_weight_decay),
        adam=Adam(alpha.parameters(), optim.a_lr, (optim.a_beta1, optim.a_beta2), optim.a_weight_decay),
        rng=np.random.default_rng([seed, 2]), k=k, total_steps=total_steps,
        optim=optim, schedule=schedule or ScheduleConfig(), dropblock=dropblock or DropBlockConfig(),
        distill=distill or DistillConfig(),
    )


def _set_trainable(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


def _phase_loss(state: SearchState, x, y, tau: float, lam: float, drop_prob: float):
    """Sum over the K sub-graphs of classification plus soft-label guidance losses."""
    masks = sample_masks(state.alpha, state.k, tau, state.rng)
    p_super = supernet_teacher_forward(state.net, x, state.alpha, tau).data if lam > 0 else None
    drop = None
    if drop_prob > 0:
        drop = DropState(drop_prob, state.rng, state.dropblock.block_size, state.dropblock.mode)
    total, acc = None, 0.0
    for k in range(state.k):
        logits = subgraph_forward(state.net, x, masks, k, drop)
        loss = tc.cross_entropy(logits, y)
        if p_super is not None:
            loss = tc.add(loss, distill_loss(p_super, tc.softmax(logits, axis=1), lam))
        total = loss if total is None else tc.add(total, loss)
        acc += float((logits.data.argmax(axis=1) == y).mean())
    return total, acc / state.k, masks


def _check_finite(loss: DTensor, state: SearchState, masks, phase: str) -> None:
    if np.isfinite(loss.data).all():
        return
    diag = {
        "phase": phase, "step": state.step,
        "alpha": {ct: {"min": float(state.alpha.array(ct).min()), "max": float(state.alpha.array(ct).max()),
                       "mean": float(state.alpha.array(ct).mean())} for ct in CELL_TYPES},
        "masks": {ct: masks.index[ct].tolist() for ct in CELL_TYPES},
    }
    tc.get_tape().clear()
    raise NonFiniteLossError(f"non-finite loss in phase {phase} at step {state.step}: {json.dumps(diag)}", diag)


def search_step(state: SearchState, train_batch, val_batch) -> dict:
    """One weight update on ``train_batch`` then one architecture update on ``val_batch``."""
    progress = state.progress
    tau = tau_at(progress, state.schedule.tau_start, state.schedule.tau_end)
    lam = lambda_schedule(progress, state.distill)
    drop_prob = drop_schedule(progress, state.dropblock)
    lr = cosine_lr(state.step, state.total_steps, state.optim.w_lr)
    weights, arch = state.weights(), state.alpha.parameters()
    tape = tc.get_tape()

    _set_trainable(arch, False)
    _set_trainable(weights, True)
    loss_a, acc_a, masks_a = _phase_loss(state, train_batch[0], train_batch[1], tau, lam, drop_prob)
    _check_finite(loss_a, state, masks_a, "weights")
    tc.backward(loss_a)
    state.sgd.step(lr)
    tc.zero_grad(weights)
    tape.clear()

    _set_trainable(weights, False)
    _set_trainable(arch, True)
    try:
        loss_b, acc_b, masks_b = _phase_loss(state, val_batch[0], val_batch[1], tau, lam, drop_prob)
        _check_finite(loss_b, state, masks_b, "architecture")
        tc.backward(loss_b)
        state.adam.step()
    finally:
        tc.zero_grad(arch)
        tape.clear()
        _set_trainable(weights, True)

    state.last_masks = {"weights": masks_a.index, "architecture": masks_b.index}
    state.step += 1
    return {"train_loss": float(loss_a.data), "train_acc": acc_a, "val_loss": float(loss_b.data),
            "val_acc": acc_b, "tau": tau, "lambda": lam, "drop_prob": drop_prob, "lr": lr}


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: SearchState, epoch: int) -> None:
    arrays = {f"w/{n}": p.data for n, p in state.net.named_parameters()}
    for ct in CELL_TYPES:
        arrays[f"alpha/{ct}"] = state.alpha.array(ct)
    names = [n for n, _ in state.net.named_parameters()]
    for n, buf in zip(names, state.sgd.buffers):
        if buf is not None:
            arrays[f"sgd/{n}"] = buf
    for i, ct in enumerate(CELL_TYPES):
        arrays[f"adam_m/{ct}"] = state.adam.m[i]
        arrays[f"adam_v/{ct}"] = state.adam.v[i]
    meta = {"step": state.step, "epoch": epoch, "adam_t": state.adam.t, "k": state.k,
            "total_steps": state.total_steps, "rng": state.rng.bit_generator.state}
    arrays["meta"] = np.array(json.dumps(meta))
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_alpha(path) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        return {ct: z[f"alpha/{ct}"] for ct in CELL_TYPES}


def restore_checkpoint(path, state: SearchState) -> int:
    """Load a snapshot into ``state``; returns the number of completed epochs."""
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta["k"] != state.k or meta["total_steps"] != state.total_steps:
            raise ConfigurationError(
                f"checkpoint was written with K={meta['k']}, total_steps={meta['total_steps']}; "
                f"this run has K={state.k}, total_steps={state.total_steps}")
        for n, p in state.net.named_parameters():
            p.data[...] = z[f"w/{n}"]
        for ct in CELL_TYPES:
            state.alpha.tensor(ct).data[...] = z[f"alpha/{ct}"]
        for i, (n, _) in enumerate(state.net.named_parameters()):
            state.sgd.buffers[i] = z[f"sgd/{n}"].copy() if f"sgd/{n}" in z else None
        for i, ct in enumerate(CELL_TYPES):
            state.adam.m[i] = z[f"adam_m/{ct}"].copy()
            state.adam.v[i] = z[f"adam_v/{ct}"].copy()
    state.adam.t = meta["adam_t"]
    state.step = meta["step"]
    state.rng.bit_generator.state = meta["rng"]
    return meta["epoch"]


# ---------------------------------------------------------------- full runs


def _format(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ints = {"epoch", "skip_count_normal", "skip_count_reduce"}
    return [{k: (int(v) if k in ints else float(v)) for k, v in row.items()} for row in rows]


def network_spec(cfg: SearchConfig, ds: Dataset) -> NetworkSpec:
    return NetworkSpec(cfg.network.num_cells, cfg.network.init_channels, ds.num_classes, ds.images.shape[1])


def run_search(cfg: SearchConfig, dataset: Dataset | None = None, out_dir=None, resume=None,
               on_epoch=None) -> tuple[Genotype, list[dict]]:
    """Search for ``cfg.search.epochs`` epochs and derive the final genotype.

    With ``out_dir`` set, one metrics row per epoch is appended to
    ``metrics.csv`` and ``checkpoint.npz`` is refreshed after every epoch.
    """
    cfg.validate()
    seed = cfg.search.seed
    ds = dataset if dataset is not None else load_dataset(cfg.data, seed)
    train, val = split_half(ds, seed)
    per_epoch = min(steps_per_epoch(train, cfg.search.batch_size), steps_per_epoch(val, cfg.search.batch_size))
    total = per_epoch * cfg.search.epochs
    state = init_search_state(network_spec(cfg, ds), cfg.search.k, total, seed, cfg.optimizer, cfg.schedule,
                              cfg.dropblock, cfg.distill)
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = out / "metrics.csv" if out else None
    history: list[dict] = []
    start_epoch = 0
    if resume is not None:
        start_epoch = restore_checkpoint(resume, state)
        if metrics_path is not None and metrics_path.exists():
            history = read_metrics(metrics_path)[:start_epoch]
    if metrics_path is not None and not (resume is not None and metrics_path.exists()):
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_FIELDS)

    for epoch in range(start_epoch, cfg.search.epochs):
        t0 = time.perf_counter()
        rows = []
        tb = batches(train, cfg.search.batch_size, np.random.default_rng([seed, 3, epoch]))
        vb = batches(val, cfg.search.batch_size, np.random.default_rng([seed, 4, epoch]))
        for _, train_batch, val_batch in zip(range(per_epoch), tb, vb):
            rows.append(search_step(state, train_batch, val_batch))
        skips = count_skip_connect(derive_genotype(state.alpha))
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean([r["train_loss"] for r in rows])),
            "val_loss": float(np.mean([r["val_loss"] for r in rows])),
            "val_acc": float(np.mean([r["val_acc"] for r in rows])),
            "tau": rows[-1]["tau"], "lambda": rows[-1]["lambda"], "drop_prob": rows[-1]["drop_prob"],
            "skip_count_normal": skips["normal"], "skip_count_reduce": skips["reduce"],
            "seconds": time.perf_counter() - t0,
        }
        history.append(row)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.3f tau %.2f", epoch, row["train_loss"],
                 row["val_loss"], row["val_acc"], row["tau"])
        if out is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow([_format(row[f]) for f in METRIC_FIELDS])
            save_checkpoint(out / "checkpoint.npz", state, epoch + 1)
        if on_epoch is not None:
            on_epoch(row, state)
    genotype = derive_genotype(state.alpha)
    return genotype, history


def evaluate(net, ds: Dataset, batch_size: int = 256) -> float:
    correct = 0
    with tc.no_record():
        for i in range(0, len(ds), batch_size):
            logits = net(ds.images[i:i + batch_size])
            correct += int((logits.data.argmax(axis=1) == ds.labels[i:i + batch_size]).sum())
    return correct / len(ds)


def train_genotype(genotype: Genotype, train: Dataset, val: Dataset, spec: NetworkSpec, epochs: int = 15,
                   batch_size: int = 64, lr: float = 0.025, seed: int = 0) -> dict:
    """Train the derived network from scratch; returns per-epoch losses and final validation accuracy."""
    net = EvalNetwork(genotype, spec, np.random.default_rng([seed, 5]))
    sgd = SGD(net.parameters(), 0.9, 3e-4)
    total = epochs * steps_per_epoch(train, batch_size)
    step, history = 0, []
    for epoch in range(epochs):
        losses = []
        for x, y in batches(train, batch_size, np.random.default_rng([seed, 6, epoch])):
            loss = tc.cross_entropy(net(x), y)
            tc.backward(loss)
            sgd.step(cosine_lr(step, total, lr))
            tc.zero_grad(sgd.params)
            tc.get_tape().clear()
            losses.append(float(loss.data))
            step += 1
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses))})
    return {"history": history, "val_acc": evaluate(net, val)}
