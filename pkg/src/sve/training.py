"""Joint ensemble training, baselines and base-model pretraining.

All members of an :class:`~sve.models.EnsembleModel` are optimised together on
the mean of their cross-entropy losses. After each AdamW step every SVE
singular-value vector is clamped back to be non-negative.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import NumericError
from .layers import SveConfig
from .metrics import evaluate
from .models import (DeepEnsemble, base_weights, default_predict_mode, mlp_model, predict,
                     transformer_block_model)
from .optim import AdamW, clip_grad_norm, lr_at
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    iterations: int = 0  # > 0 overrides epochs with a fixed number of steps
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 0.05
    schedule: str = "cosine"
    warmup_fraction: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    method: str = "sve"
    n_members: int = 4
    sigma_init: float = 0.01
    shared_batches: bool = True
    eval_every_epoch: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0")
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "linear", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def sve_config(self):
        return SveConfig(self.n_members if self.method == "sve" else 1, self.sigma_init)


@dataclass
class ArchSpec:
    arch: str = "mlp"
    dims: tuple = (16, 32)  # input size then hidden sizes (mlp)
    n_classes: int = 8
    activation: str = "relu"
    d_model: int = 8
    n_heads: int = 2
    d_ff: int = 16
    seq_len: int = 4

    @property
    def input_dim(self):
        return self.dims[0] if self.arch == "mlp" else self.d_model * self.seq_len


def build_model(arch, method, sve_cfg, base=None, rng=None):
    if arch.arch == "mlp":
        return mlp_model(list(arch.dims), arch.n_classes, sve_cfg, base, rng, method=method,
                         activation=arch.activation)
    if arch.arch == "transformer":
        return transformer_block_model(arch.d_model, arch.n_heads, arch.d_ff, arch.n_classes, sve_cfg,
                                       base, rng, seq_len=arch.seq_len, method=method)
    raise ValueError(f"unknown architecture {arch.arch!r}")


@dataclass
class History:
    step_loss: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)
    epoch_metrics: list = field(default_factory=list)


def joint_loss(model, x, y, members=None, dropout_rng=None):
    """Mean member cross-entropy, reduced in ascending member order."""
    members = range(model.n_members) if members is None else members
    members = list(members)
    total = None
    for k in members:
        drop = None if dropout_rng is None else dropout_rng.split(f"m{k}")
        term = T.softmax_cross_entropy(model.logits(k, x, dropout_rng=drop), y)
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / len(members))


def _batches(n, batch_size, perm):
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def n_steps(n_samples, cfg):
    if cfg.iterations > 0:
        return cfg.iterations
    return cfg.epochs * math.ceil(n_samples / cfg.batch_size)


def train_joint(model, data, cfg, eval_data=None):
    """Optimise ``model`` in place; returns (model, History)."""
    rng = Rng(cfg.seed).split("train")
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    total = n_steps(len(data), cfg)
    history = History()
    uses_dropout = model.dropout_rate > 0
    step = 0
    epoch = 0
    while step < total:
        if cfg.shared_batches:
            orders = [rng.split(f"epoch{epoch}").permutation(len(data))]
        else:
            orders = [rng.split(f"epoch{epoch}/member{k}").permutation(len(data))
                      for k in range(model.n_members)]
        batch_iters = [_batches(len(data), cfg.batch_size, o) for o in orders]
        epoch_losses = []
        for idxs in zip(*batch_iters):
            if step >= total:
                break
            drop = rng.split(f"dropout{step}") if uses_dropout else None
            if len(idxs) == 1:
                idx = idxs[0]
                loss = joint_loss(model, data.x[idx], data.y[idx], dropout_rng=drop)
            else:
                terms = None
                for k, idx in enumerate(idxs):
                    t = joint_loss(model, data.x[idx], data.y[idx], members=[k], dropout_rng=drop)
                    terms = t if terms is None else T.add(terms, t)
                loss = T.mul(terms, 1.0 / len(idxs))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(params, cfg.grad_clip)
            opt.step(lr_at(step, cfg.lr, total, cfg.warmup_fraction, cfg.schedule))
            model.project_nonneg()
            history.step_loss.append(value)
            epoch_losses.append(value)
            step += 1
        history.epoch_loss.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        if eval_data is not None and cfg.eval_every_epoch:
            history.epoch_metrics.append(evaluate_model(model, eval_data, seed=cfg.seed).as_dict())
        epoch += 1
    model.mode = "eval"
    return model, history


def evaluate_model(model, data, seed=0, ood=None):
    mode = default_predict_mode(model)
    rng = Rng(seed).split("mc_dropout") if mode == "mc_dropout_eval" else None
    pb = predict(model, data.x, mode, rng=rng)
    ood_probs = None
    if ood is not None:
        ood_rng = Rng(seed).split("mc_dropout/ood") if rng is not None else None
        ood_probs = predict(model, ood.x, mode, rng=ood_rng).mean_probs
    return evaluate(pb.mean_probs, data.y, ood_probs=ood_probs)


def pretrain_base(arch, source_data, cfg, checkpoint_path=None):
    """Train a plain model on the source task; returns (base weights, model)."""
    model = build_model(arch, "single", SveConfig(1, 0.0), None, Rng(cfg.seed).split("pretrain"))
    cfg = replace(cfg, method="single", n_members=1)
    if n_steps(len(source_data), cfg) > 0:
        train_joint(model, source_data, cfg)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(model, checkpoint_path, metadata={"stage": "pretrain"})
    return base_weights(model), model


def train_single(arch, base, data, cfg, method=None, eval_data=None):
    """Build and train one model of ``cfg.method`` (or ``method``) from ``base``."""
    method = method or cfg.method
    cfg = replace(cfg, method=method)
    model = build_model(arch, method, cfg.sve_config(), base, Rng(cfg.seed).split("model"))
    return train_joint(model, data, cfg, eval_data)


def train_deep_ensemble(arch, base, data, cfg, n_members):
    """``n_members`` single models trained with seeds seed+0 .. seed+M-1."""
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    members = []
    for k in range(n_members):
        model, _ = train_single(arch, base, data, replace(cfg, seed=cfg.seed + k), method="single")
        members.append(model)
    return DeepEnsemble(members)


def train_method(arch, base, data, cfg):
    """Dispatch on ``cfg.method``; deep ensembles use ``cfg.n_members`` members."""
    if cfg.method == "deep_ensemble":
        return train_deep_ensemble(arch, base, data, cfg, cfg.n_members)
    model, _ = train_single(arch, base, data, cfg)
    return model
