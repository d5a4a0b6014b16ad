import math

import numpy as np


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied only to parameters listed in ``decay``; by default that is
    every matrix-shaped parameter (head and full-model weights), leaving
    singular-value vectors and biases undecayed.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decay=None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        if decay is None:
            decay = [p.data.ndim == 2 for p in self.params]
        self.decay = list(decay)
        self.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v, decay in zip(self.params, self.exp_avg, self.exp_avg_sq, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if decay and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            denom = np.sqrt(v) / math.sqrt(bc2) + self.eps
            p.data -= (lr / bc1) * m / denom


def global_grad_norm(params):
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their global L2 norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def lr_at(step, base_lr, total_steps, warmup_fraction=0.0, schedule="cosine"):
    """Linear warmup from 0, then cosine/linear decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup = int(round(warmup_fraction * total_steps))
    if step < warmup:
        return base_lr * step / warmup
    if schedule == "constant":
        return base_lr
    span = total_steps - warmup
    progress = min(1.0, (step - warmup) / span) if span > 0 else 1.0
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    if schedule == "linear":
        return base_lr * (1.0 - progress)
    raise ValueError(f"unknown schedule {schedule!r}")
