"""Linear layers: plain weights and the singular-value ensemble parameterisation.

An :class:`SveLinear` keeps the singular vectors of a pretrained matrix frozen
and holds one trainable singular-value vector per ensemble member, so member
``k`` computes ``U diag(sigma_k) V^T x + b``.
"""

from __future__ import annotations

import fnmatch
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .svd import svd
from .tensor import Tensor


@dataclass
class SveConfig:
    n_members: int = 4
    sigma_init: float = 0.01
    target_layers: tuple = ("*",)

    def __post_init__(self):
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")
        if not 0 <= self.sigma_init < 1:
            raise ValueError("sigma_init must lie in [0, 1)")
        if self.sigma_init > 0.5:
            warnings.warn(f"sigma_init={self.sigma_init} is large; singular values may clamp at 0")
        self.target_layers = tuple(self.target_layers)

    def targets(self, layer_name):
        return any(fnmatch.fnmatchcase(layer_name, pat) for pat in self.target_layers)


class PlainLinear:
    """Ordinary ``W x + b``; trainable for full fine-tuning, frozen otherwise."""

    kind = "plain"

    def __init__(self, weight, bias=None, name="", trainable=True):
        self.name = name
        self.weight = Tensor(weight, requires_grad=trainable, name=f"{name}.weight")
        self.bias = None if bias is None else Tensor(bias, requires_grad=trainable, name=f"{name}.bias")

    @property
    def shape(self):
        return self.weight.shape

    def forward(self, member, x):
        out = T.matmul(self.weight, x)
        return out if self.bias is None else T.add_column(out, self.bias)

    def parameters(self):
        return [p for p in (self.weight, self.bias) if p is not None and p.requires_grad]

    def state(self):
        out = {"weight": self.weight.data}
        if self.bias is not None:
            out["bias"] = self.bias.data
        return out


class SveLinear:
    kind = "sve"

    def __init__(self, u, vt, sigma_pretrained, sigma_members, bias=None, name=""):
        u, vt = np.asarray(u, dtype=np.float64), np.asarray(vt, dtype=np.float64)
        r = sigma_pretrained.shape[0]
        if u.shape[1] != r or vt.shape[0] != r or r != min(u.shape[0], vt.shape[1]):
            raise ShapeError(f"SveLinear: inconsistent factors u{u.shape} sigma({r},) vt{vt.shape}")
        self.name = name
        self._u = Tensor(u, name=f"{name}.u")
        self._vt = Tensor(vt, name=f"{name}.vt")
        self._bias = None if bias is None else Tensor(bias, name=f"{name}.bias")
        self.sigma_pretrained = np.array(sigma_pretrained, dtype=np.float64)
        self.sigma_members = [
            Tensor(s, requires_grad=True, name=f"{name}.sigma[{k}]") for k, s in enumerate(sigma_members)
        ]
        self.factored = True

    u = property(lambda self: self._u.data)
    vt = property(lambda self: self._vt.data)
    bias = property(lambda self: None if self._bias is None else self._bias.data)

    @property
    def n_members(self):
        return len(self.sigma_members)

    @property
    def rank(self):
        return self.sigma_pretrained.shape[0]

    @property
    def shape(self):
        return (self.u.shape[0], self.vt.shape[1])

    def forward(self, member, x):
        if not 0 <= member < self.n_members:
            raise IndexError(f"{self.name}: member {member} out of range for M={self.n_members}")
        sigma = self.sigma_members[member]
        if self.factored:
            out = T.matmul(self._u, T.scale_rows(T.matmul(self._vt, x), sigma))
        else:
            # materialise W = U diag(sigma) V^T first (the plain fine-tuning route)
            out = T.matmul(T.matmul(self._u, T.scale_rows(self._vt, sigma)), x)
        return out if self._bias is None else T.add_column(out, self._bias)

    def weight(self, member):
        return (self.u * self.sigma_members[member].data) @ self.vt

    def project_nonneg(self):
        for s in self.sigma_members:
            np.maximum(s.data, 0.0, out=s.data)

    def parameters(self):
        return list(self.sigma_members)

    def state(self):
        out = {"u": self.u, "vt": self.vt, "sigma_pretrained": self.sigma_pretrained,
               "sigma_members": np.stack([s.data for s in self.sigma_members])}
        if self._bias is not None:
            out["bias"] = self.bias
        return out


def wrap(w, bias, cfg, rng, name=""):
    """SVD-decompose ``w`` and build M members with multiplicative noise on sigma."""
    f = svd(w)
    members = []
    for k in range(cfg.n_members):
        child = rng.split(f"{name}/member{k}")
        eps = child.normal(f.rank, 0.0, cfg.sigma_init) if cfg.sigma_init > 0 else np.zeros(f.rank)
        members.append(np.maximum(f.sigma * (1.0 + eps), 0.0))
    return SveLinear(f.u, f.vt, f.sigma, members, bias=bias, name=name)


def project_nonneg(layer):
    layer.project_nonneg()


def overhead_stats(layer_shapes, d, n_members, heads):
    """Parameter accounting for SVE over the given target matrices.

    ``overhead_fraction`` is the exact ratio of extra singular values
    ((M - 1) sum min(m, n)) to the target-matrix parameter count;
    ``overhead_approx`` is (M - 1) / (2 d), exact for the six d-by-d / d-by-4d
    projections of a standard transformer layer.
    """
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    per_member = sum(min(m, n) for m, n in layer_shapes)
    base = sum(m * n for m, n in layer_shapes)
    hd, c = heads
    head_params = hd * c + c
    return {
        "trainable_per_member": per_member,
        "base_params": base,
        "head_params_per_member": head_params,
        "trainable_total": n_members * per_member + n_members * head_params,
        "overhead_fraction": (n_members - 1) * per_member / base,
        "overhead_approx": (n_members - 1) / (2 * d),
    }


@dataclass
class DiversityTable:
    layer: str
    indices: np.ndarray  # singular-value indices kept (sigma_i > 0)
    percent: np.ndarray  # (len(indices), M): 100 (sigma_k,i - sigma_i) / sigma_i
    members: list = field(default_factory=list)


def diversity_report(layer, top_k):
    if top_k > layer.rank:
        raise ValueError(f"top_k={top_k} exceeds rank {layer.rank}")
    ref = layer.sigma_pretrained[:top_k]
    keep = np.flatnonzero(ref != 0)
    sig = np.stack([s.data[:top_k] for s in layer.sigma_members], axis=1)
    pct = 100.0 * (sig[keep] - ref[keep, None]) / ref[keep, None]
    return DiversityTable(layer.name, keep, pct, list(range(layer.n_members)))
