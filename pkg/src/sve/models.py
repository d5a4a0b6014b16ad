"""Small classifiers built on SVE layers: an MLP and a pre-norm encoder block.

Inputs arrive as rows ``(B, D)``; layers work on columns, so the forward pass
transposes once at the start and returns logits as rows ``(B, C)``.

``method`` selects the parameterisation of the backbone:

* ``sve``        shared frozen singular vectors, M trainable sigma vectors
* ``svf``        M = 1 singular-value fine-tuning through the materialised weight
* ``single``     plain fully-trainable linear layers, one head
* ``mc_dropout`` as ``single`` with dropout after every hidden activation
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeError
from .layers import PlainLinear, SveConfig, SveLinear, wrap
from .tensor import Tensor

METHODS = ("single", "svf", "sve", "mc_dropout", "deep_ensemble")
MC_DROPOUT_RATE = 0.05
MC_DROPOUT_PASSES = 10
BLOCK_LAYERS = ("q", "k", "v", "o", "fc1", "fc2")


def uniform_init(rng, m, n):
    """Weight (m, n) and bias (m,) drawn from U(-1/sqrt(n), 1/sqrt(n))."""
    bound = 1.0 / math.sqrt(n)
    return rng.uniform_range(-bound, bound, (m, n)), rng.uniform_range(-bound, bound, m)


def _activation(name):
    if name == "relu":
        return T.relu
    if name == "gelu_tanh":
        return T.gelu_tanh
    raise ValueError(f"unknown activation {name!r}")


def _dropout(h, rate, rng):
    if rate <= 0 or rng is None:
        return h
    keep = (rng.uniform(h.shape) >= rate) / (1.0 - rate)
    return T.mul(h, Tensor(keep))


class EnsembleModel:
    """Backbone layers plus one classification head per member."""

    def __init__(self, arch, layers, heads, spec, frozen=None):
        self.arch = arch
        self.layers = dict(layers)
        self.heads = list(heads)
        self.spec = dict(spec)
        self.frozen = {} if frozen is None else {k: Tensor(v) for k, v in frozen.items()}
        self.activation = spec.get("activation", "relu")
        self.dropout_rate = float(spec.get("dropout_rate", 0.0))
        self.mode = "train"
        sve = [l for l in self.layers.values() if isinstance(l, SveLinear)]
        if sve and any(l.n_members != len(self.heads) for l in sve):
            raise ShapeError("all SVE layers must share the number of heads")

    @property
    def n_members(self):
        return len(self.heads)

    @property
    def method(self):
        return self.spec["method"]

    def sve_layers(self):
        return [l for l in self.layers.values() if isinstance(l, SveLinear)]

    def parameters(self):
        params = []
        for layer in self.layers.values():
            params.extend(layer.parameters())
        for head in self.heads:
            params.extend(head.parameters())
        return params

    def n_trainable(self):
        return sum(p.size for p in self.parameters())

    def project_nonneg(self):
        for layer in self.sve_layers():
            layer.project_nonneg()

    def logits(self, member, x, dropout_rng=None):
        """Member logits (B, C) for row inputs ``x`` (B, D)."""
        if not 0 <= member < self.n_members:
            raise IndexError(f"member {member} out of range for M={self.n_members}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec["input_dim"]:
            raise ShapeError(f"expected inputs (B, {self.spec['input_dim']}), got {x.shape}")
        rate = self.dropout_rate if dropout_rng is not None else 0.0
        if self.arch == "mlp":
            h = _mlp_features(self, member, x, rate, dropout_rng)
        else:
            h = _block_features(self, member, x, rate, dropout_rng)
        return T.transpose(self.heads[member].forward(member, h))

    def state(self):
        """Flat name -> array map of every parameter and frozen factor."""
        out = {}
        for name, layer in self.layers.items():
            for key, arr in layer.state().items():
                out[f"layers/{name}/{key}"] = arr
        for k, head in enumerate(self.heads):
            for key, arr in head.state().items():
                out[f"heads/{k}/{key}"] = arr
        for name, t in self.frozen.items():
            out[f"frozen/{name}"] = t.data
        return out


def _mlp_features(model, member, x, rate, rng):
    act = _activation(model.activation)
    h = Tensor(x.T)
    for layer in model.layers.values():
        h = _dropout(act(layer.forward(member, h)), rate, rng)
    return h


def _split_heads(x, n_heads, B, L):
    d = x.shape[0]
    return T.transpose(T.reshape(x, (n_heads, d // n_heads, B, L)), (2, 0, 3, 1))


def self_attention(model, member, h, B, L):
    """Multi-head self-attention over columns h (d, B*L); returns (d, B*L) before ``o``."""
    n_heads = model.spec["n_heads"]
    d = h.shape[0]
    dh = d // n_heads
    q = _split_heads(model.layers["q"].forward(member, h), n_heads, B, L)
    k = _split_heads(model.layers["k"].forward(member, h), n_heads, B, L)
    v = _split_heads(model.layers["v"].forward(member, h), n_heads, B, L)
    scores = T.mul(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = T.bmm(T.softmax(scores, axis=-1), v)  # (B, H, L, dh)
    return T.reshape(T.transpose(ctx, (1, 3, 0, 2)), (d, B * L))


def _block_features(model, member, x, rate, rng):
    d, L = model.spec["d_model"], model.spec["seq_len"]
    B = x.shape[0]
    # row b holds L tokens of width d; column b*L + t is token t of sample b
    tokens = Tensor(x.reshape(B * L, d).T)
    f = model.frozen
    h = T.layernorm(tokens, f["ln1.gain"], f["ln1.bias"])
    a = model.layers["o"].forward(member, self_attention(model, member, h, B, L))
    x1 = T.add(tokens, a)
    h2 = T.layernorm(x1, f["ln2.gain"], f["ln2.bias"])
    ff = _dropout(T.gelu_tanh(model.layers["fc1"].forward(member, h2)), rate, rng)
    x2 = T.add(x1, model.layers["fc2"].forward(member, ff))
    return T.mean(T.reshape(x2, (d, B, L)), axis=2)


def _make_heads(n, d, n_classes, rng):
    heads = []
    for k in range(n):
        w, b = uniform_init(rng.split(f"head{k}"), n_classes, d)
        heads.append(PlainLinear(w, b, name=f"head{k}"))
    return heads


def _backbone_layer(name, w, b, method, cfg, rng):
    if method in ("single", "mc_dropout", "deep_ensemble"):
        return PlainLinear(w, b, name=name, trainable=True)
    if method == "frozen":
        return PlainLinear(w, b, name=name, trainable=False)
    if method not in ("sve", "svf"):
        raise ValueError(f"unknown method {method!r}")
    if not cfg.targets(name):
        return PlainLinear(w, b, name=name, trainable=False)
    layer = wrap(w, b, cfg, rng.split(f"sve/{name}"), name=name)
    layer.factored = method == "sve"
    return layer


def _n_heads_for(method, cfg):
    return cfg.n_members if method == "sve" else 1


def _check_cfg(method, cfg):
    if method == "svf" and cfg.n_members != 1:
        cfg = SveConfig(1, cfg.sigma_init, cfg.target_layers)
    return cfg


def mlp_model(dims, n_classes, cfg, base_weights=None, rng=None, method="sve",
              activation="relu", dropout_rate=None):
    """MLP with hidden sizes ``dims[1:]`` on ``dims[0]`` inputs and per-member heads.

    ``base_weights`` is a list of (W, b) per hidden layer; when omitted the
    layers are freshly initialised from ``rng`` (the random-basis regime).
    """
    if len(dims) < 2:
        raise ShapeError("dims needs an input size and at least one hidden size")
    cfg = _check_cfg(method, cfg)
    if base_weights is None:
        init = rng.split("base")
        base_weights = [uniform_init(init.split(f"fc{i + 1}"), dims[i + 1], dims[i])
                        for i in range(len(dims) - 1)]
    if len(base_weights) != len(dims) - 1:
        raise ShapeError(f"{len(base_weights)} base matrices for {len(dims) - 1} layers")
    layers = {}
    for i, (w, b) in enumerate(base_weights):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (dims[i + 1], dims[i]):
            raise ShapeError(f"fc{i + 1}: base weight {w.shape}, expected {(dims[i + 1], dims[i])}")
        name = f"fc{i + 1}"
        layers[name] = _backbone_layer(name, w, b, method, cfg, rng)
    if dropout_rate is None:
        dropout_rate = MC_DROPOUT_RATE if method == "mc_dropout" else 0.0
    spec = {"arch": "mlp", "method": method, "dims": list(dims), "n_classes": n_classes,
            "input_dim": dims[0], "activation": activation, "dropout_rate": dropout_rate,
            "n_members": _n_heads_for(method, cfg), "sigma_init": cfg.sigma_init}
    heads = _make_heads(_n_heads_for(method, cfg), dims[-1], n_classes, rng)
    return EnsembleModel("mlp", layers, heads, spec)


def transformer_block_model(d, n_heads, d_ff, n_classes, cfg, base_weights=None, rng=None,
                            seq_len=4, method="sve", dropout_rate=None):
    """One pre-norm encoder block over ``seq_len`` tokens of width ``d``, mean-pooled.

    ``base_weights`` maps q, k, v, o, fc1, fc2 to (W, b) and may carry
    ``ln1``/``ln2`` (gain, bias) pairs; layernorm parameters stay frozen.
    """
    if d % n_heads:
        raise ShapeError(f"d={d} is not divisible by n_heads={n_heads}")
    cfg = _check_cfg(method, cfg)
    shapes = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "fc1": (d_ff, d), "fc2": (d, d_ff)}
    base_weights = dict(base_weights or {})
    init = rng.split("base")
    layers = {}
    for name in BLOCK_LAYERS:
        if name in base_weights:
            w, b = base_weights[name]
        else:
            w, b = uniform_init(init.split(name), *shapes[name])
        w = np.asarray(w, dtype=np.float64)
        if w.shape != shapes[name]:
            raise ShapeError(f"{name}: base weight {w.shape}, expected {shapes[name]}")
        layers[name] = _backbone_layer(name, w, b, method, cfg, rng)
    frozen = {}
    for ln in ("ln1", "ln2"):
        gain, bias = base_weights.get(ln, (np.ones(d), np.zeros(d)))
        frozen[f"{ln}.gain"], frozen[f"{ln}.bias"] = np.asarray(gain, float), np.asarray(bias, float)
    if dropout_rate is None:
        dropout_rate = MC_DROPOUT_RATE if method == "mc_dropout" else 0.0
    spec = {"arch": "transformer", "method": method, "d_model": d, "n_heads": n_heads, "d_ff": d_ff,
            "seq_len": seq_len, "n_classes": n_classes, "input_dim": d * seq_len,
            "activation": "gelu_tanh", "dropout_rate": dropout_rate,
            "n_members": _n_heads_for(method, cfg), "sigma_init": cfg.sigma_init}
    heads = _make_heads(_n_heads_for(method, cfg), d, n_classes, rng)
    return EnsembleModel("transformer", layers, heads, spec, frozen)


def base_weights(model):
    """Hidden-layer (W, b) pairs of a trained model, as used to seed a new basis."""
    out = {}
    for name, layer in model.layers.items():
        if isinstance(layer, SveLinear):
            w = layer.weight(0)
            b = layer.bias
        else:
            w = layer.weight.data.copy()
            b = None if layer.bias is None else layer.bias.data.copy()
        out[name] = (w, None if b is None else np.array(b))
    if model.arch == "mlp":
        return [out[k] for k in model.layers]
    for ln in ("ln1", "ln2"):
        out[ln] = (model.frozen[f"{ln}.gain"].data.copy(), model.frozen[f"{ln}.bias"].data.copy())
    return out


@dataclass
class PredictionBatch:
    member_logits: np.ndarray  # (M, B, C)
    member_probs: np.ndarray  # (M, B, C)
    mean_probs: np.ndarray  # (B, C)


def softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class DeepEnsemble:
    """M independently trained single models averaged at prediction time."""

    def __init__(self, members):
        self.members = list(members)
        self.spec = dict(self.members[0].spec, method="deep_ensemble", n_members=len(self.members))

    @property
    def n_members(self):
        return len(self.members)

    @property
    def method(self):
        return "deep_ensemble"


def predict(model, x, mode="eval", rng=None, n_passes=MC_DROPOUT_PASSES):
    """Member and mean class probabilities.

    ``mode="eval"`` runs every member without dropout. ``mode="mc_dropout_eval"``
    runs ``n_passes`` stochastic passes of member 0 and treats them as members.
    """
    with T.no_grad():
        if isinstance(model, DeepEnsemble):
            logits = [m.logits(0, x).data for m in model.members]
        elif mode == "mc_dropout_eval":
            if rng is None:
                raise ValueError("mc_dropout_eval needs an rng for the dropout masks")
            logits = [model.logits(0, x, dropout_rng=rng.split(f"pass{p}")).data
                      for p in range(n_passes)]
        elif mode == "eval":
            logits = [model.logits(k, x).data for k in range(model.n_members)]
        else:
            raise ValueError(f"unknown predict mode {mode!r}")
    member_logits = np.stack(logits)
    if not np.isfinite(member_logits).all():
        raise NumericError("predict: non-finite logits")
    member_probs = softmax_rows(member_logits)
    # first member plus mean deviation: equals the plain mean algebraically and
    # is bitwise equal to every member when all members agree
    base = member_probs[0]
    dev = np.zeros_like(base)
    for k in range(1, member_probs.shape[0]):
        dev += member_probs[k] - base
    mean_probs = base + dev / member_probs.shape[0]
    return PredictionBatch(member_logits, member_probs, mean_probs)


def default_predict_mode(model):
    return "mc_dropout_eval" if getattr(model, "method", None) == "mc_dropout" else "eval"
