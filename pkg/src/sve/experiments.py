"""Experiment runners and result persistence.

Each runner takes a validated :class:`~sve.config.ExperimentConfig`, loops over
its seeds in order and returns a results record (a plain dict). :func:`run`
writes that record as ``results.json`` plus ``per_seed.csv`` and, for sweep
experiments, ``plot_data.csv``. Wall-clock time goes to ``timing.json`` so the
results file itself is byte-identical across repeated runs.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import (CorruptionSpec, TaskSpec, corrupt, load_csv_splits, ood_pair, sample,
                   source_target_split, CsvSchema)
from .errors import CapabilityError, DependencyError
from .layers import diversity_report, overhead_stats
from .models import DeepEnsemble, base_weights
from .rng import ALGORITHM_ID
from .training import (ArchSpec, TrainConfig, evaluate_model, pretrain_base, train_method)

log = logging.getLogger(__name__)

FULL_MODEL_METHODS = ("single", "deep_ensemble", "mc_dropout")
METRIC_KEYS = ("accuracy", "ece", "nll", "brier")


# -- serialisation ----------------------------------------------------------

def fmt_float(x):
    x = float(x)
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def dumps(obj, indent=0):
    """JSON with every float written to 17 significant digits."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj)
    if isinstance(obj, str):
        import json
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist(), indent)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + f"\n{end}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(f"{pad}{dumps(v, indent + 1)}" for v in obj) + f"\n{end}]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_csv(path, rows, columns=None):
    if not rows:
        return
    columns = columns or list(rows[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt_float(row[c]) if isinstance(row[c], (float, np.floating)) else row[c]
                    for c in columns])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def aggregate(values):
    """Mean and sample standard deviation (N - 1); std is None for one value."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else None
    return {"mean": float(np.mean(arr)), "std": std}


def aggregate_metrics(reports, keys=METRIC_KEYS):
    return {k: aggregate([r[k] for r in reports]) for k in keys}


# -- building blocks --------------------------------------------------------

def task_spec(cfg):
    d = cfg.data
    return TaskSpec(n_classes=d.n_classes, dim=d.dim, signal_dim=d.signal_dim, modes=d.modes,
                    radius=d.radius, spread=d.spread, geometry_seed=d.geometry_seed)


def arch_spec(cfg, input_dim=None):
    m = cfg.model
    dim = input_dim or cfg.data.dim
    if m.arch == "mlp":
        return ArchSpec("mlp", tuple([dim] + list(m.hidden)), cfg.data.n_classes, m.activation)
    return ArchSpec("transformer", (dim,), cfg.data.n_classes, "gelu_tanh", m.d_model, m.n_heads,
                    m.d_ff, m.seq_len)


def target_data(cfg, seed):
    d = cfg.data
    if d.kind == "csv":
        train, test = load_csv_splits(d.train_path, d.test_path, CsvSchema(d.label, (), d.n_classes))
        return train, test
    spec = task_spec(cfg)
    train = sample(spec, d.n_train_per_class, seed, "target")
    test = sample(spec, d.n_test_per_class, seed, "test")
    return train, test


def ood_data(cfg, seed):
    spec = task_spec(cfg)
    ood_spec = replace(spec, geometry_seed=cfg.data.ood_geometry_seed, radius=cfg.data.ood_radius)
    return ood_pair(spec, ood_spec, cfg.data.n_test_per_class, seed)


def train_config(cfg, seed, method=None, n_members=None):
    t = cfg.train
    method = method or t.method
    lr = t.baseline_lr if method in FULL_MODEL_METHODS else t.lr
    return TrainConfig(epochs=t.epochs, iterations=t.iterations, batch_size=t.batch_size, lr=lr,
                       weight_decay=t.weight_decay, schedule=t.schedule,
                       warmup_fraction=t.warmup_fraction, grad_clip=t.grad_clip, seed=seed,
                       method=method, n_members=n_members or t.n_members, sigma_init=t.sigma_init,
                       shared_batches=t.shared_batches)


def pretrain_config(cfg, seed, epochs=None):
    p = cfg.pretrain
    return TrainConfig(epochs=p.epochs if epochs is None else epochs, batch_size=p.batch_size,
                       lr=p.lr, weight_decay=p.weight_decay, seed=seed, method="single", n_members=1)


class BaseCache:
    """Pretrained bases per (seed, arm), computed once per run."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._cache = {}

    def get(self, seed, arm="strong"):
        key = (seed, arm)
        if key not in self._cache:
            self._cache[key] = self._make(seed, arm)
        return self._cache[key]

    def _make(self, seed, arm):
        cfg = self.cfg
        if arm == "random":
            return None
        if arm == "strong" and cfg.pretrain.checkpoint:
            path = cfg.pretrain.checkpoint.format(seed=seed)
            if not os.path.exists(path):
                raise DependencyError(f"pretrain checkpoint {path} does not exist; run 'pretrain' first")
            return base_weights(load_checkpoint(path))
        if cfg.data.kind != "synthetic":
            raise DependencyError("pretraining on file data needs pretrain.checkpoint")
        source, _ = source_target_split(task_spec(cfg), cfg.data.source_overlap,
                                        cfg.data.source_per_class, cfg.data.n_train_per_class, seed)
        epochs = cfg.pretrain.weak_epochs if arm == "weak" else cfg.pretrain.epochs
        base, _ = pretrain_base(arch_spec(cfg), source, pretrain_config(cfg, seed, epochs))
        return base


def parameter_counts(model, arch):
    if isinstance(model, DeepEnsemble):
        return {"trainable": int(sum(m.n_trainable() for m in model.members))}
    out = {"trainable": int(model.n_trainable())}
    sve = model.sve_layers()
    if sve:
        width = arch.dims[-1] if arch.arch == "mlp" else arch.d_model
        stats = overhead_stats([l.shape for l in sve], width, model.n_members,
                               (width, arch.n_classes))
        out.update({k: v for k, v in stats.items()})
    return out


def diversity_tables(model, top_k):
    out = {}
    for layer in model.sve_layers():
        table = diversity_report(layer, min(top_k, layer.rank))
        out[layer.name] = {"indices": table.indices.tolist(), "percent": table.percent.tolist()}
    return out


def _metrics_dict(report):
    d = report.as_dict()
    d["bin_table"] = [list(b) for b in d["bin_table"]]
    return d


# -- experiments ------------------------------------------------------------

def exp_pretrain(cfg, out_dir):
    per_seed = []
    for seed in cfg.seeds:
        source, _ = source_target_split(task_spec(cfg), cfg.data.source_overlap,
                                        cfg.data.source_per_class, cfg.data.n_train_per_class, seed)
        path = os.path.join(out_dir, f"pretrain_seed{seed}.ckpt")
        _, model = pretrain_base(arch_spec(cfg), source, pretrain_config(cfg, seed), checkpoint_path=path)
        report = evaluate_model(model, source, seed=seed)
        per_seed.append({"seed": seed, "checkpoint": os.path.basename(path),
                         "source_accuracy": report.accuracy, "source_nll": report.nll})
    agg = {k: aggregate([r[k] for r in per_seed]) for k in ("source_accuracy", "source_nll")}
    return {"per_seed": per_seed, "aggregate": agg}


def exp_finetune(cfg, out_dir):
    bases = BaseCache(cfg)
    per_seed = []
    for seed in cfg.seeds:
        train, test = target_data(cfg, seed)
        arch = arch_spec(cfg, train.dim)
        model = train_method(arch, bases.get(seed), train, train_config(cfg, seed))
        path = os.path.join(out_dir, f"finetune_{cfg.train.method}_seed{seed}.ckpt")
        save_checkpoint(model, path, metadata={"stage": "finetune", "seed": seed, "config": cfg.as_dict()})
        entry = {"seed": seed, "method": cfg.train.method, "checkpoint": os.path.basename(path),
                 "metrics": _metrics_dict(evaluate_model(model, test, seed=seed)),
                 "parameters": parameter_counts(model, arch)}
        if not isinstance(model, DeepEnsemble) and model.sve_layers():
            entry["diversity"] = diversity_tables(model, cfg.sweep.top_k)
        per_seed.append(entry)
    return {"per_seed": per_seed, "aggregate": aggregate_metrics([e["metrics"] for e in per_seed])}


def exp_eval(cfg, out_dir):
    per_seed = []
    for seed in cfg.seeds:
        path = cfg.eval.checkpoint.format(seed=seed)
        if not os.path.exists(path):
            raise DependencyError(f"checkpoint {path} does not exist")
        model = load_checkpoint(path)
        _, test = target_data(cfg, seed)
        per_seed.append({"seed": seed, "checkpoint": path,
                         "metrics": _metrics_dict(evaluate_model(model, test, seed=seed))})
    return {"per_seed": per_seed, "aggregate": aggregate_metrics([e["metrics"] for e in per_seed])}


def _methods(cfg, required=()):
    methods = list(cfg.sweep.methods)
    for m in required:
        if m not in methods:
            methods.append(m)
    return methods


def exp_ood(cfg, out_dir):
    bases = BaseCache(cfg)
    per_seed, rows = [], []
    methods = _methods(cfg)
    for seed in cfg.seeds:
        train, _ = target_data(cfg, seed)
        ind, ood = ood_data(cfg, seed)
        entry = {"seed": seed, "methods": {}}
        for method in methods:
            model = train_method(arch_spec(cfg), bases.get(seed), train, train_config(cfg, seed, method))
            entry["methods"][method] = _metrics_dict(evaluate_model(model, ind, seed=seed, ood=ood))
        per_seed.append(entry)
    agg = {}
    for method in methods:
        reports = [e["methods"][method] for e in per_seed]
        flat = [dict(r, **r["ood"]) for r in reports]
        agg[method] = aggregate_metrics(flat, METRIC_KEYS + ("auroc", "auprc", "fpr_at_95_tpr"))
        rows.append({"method": method, **{k: v["mean"] for k, v in agg[method].items()}})
    return {"per_seed": per_seed, "aggregate": agg, "rows": rows}


def exp_shift_sweep(cfg, out_dir):
    bases = BaseCache(cfg)
    methods = _methods(cfg)
    per_seed = []
    for seed in cfg.seeds:
        train, test = target_data(cfg, seed)
        entry = {"seed": seed, "results": []}
        for method in methods:
            model = train_method(arch_spec(cfg), bases.get(seed), train, train_config(cfg, seed, method))
            clean = evaluate_model(model, test, seed=seed)
            entry["results"].append({"method": method, "corruption": "none", "severity": 0,
                                     **{k: getattr(clean, k) for k in METRIC_KEYS}})
            for kind in cfg.sweep.corruptions:
                for sev in cfg.sweep.severities:
                    shifted = corrupt(test, CorruptionSpec(kind, sev), seed)
                    r = evaluate_model(model, shifted, seed=seed)
                    entry["results"].append({"method": method, "corruption": kind, "severity": sev,
                                             **{k: getattr(r, k) for k in METRIC_KEYS}})
        per_seed.append(entry)
    rows = []
    keys = [(r["method"], r["corruption"], r["severity"]) for r in per_seed[0]["results"]]
    for method, kind, sev in keys:
        vals = [next(r for r in e["results"] if (r["method"], r["corruption"], r["severity"]) == (method, kind, sev))
                for e in per_seed]
        rows.append({"method": method, "corruption": kind, "severity": sev,
                     **{k: float(np.mean([v[k] for v in vals])) for k in METRIC_KEYS}})
    # averaged over corruption kinds: the severity curve
    for method in methods:
        for sev in cfg.sweep.severities:
            sel = [r for r in rows if r["method"] == method and r["severity"] == sev
                   and r["corruption"] != "all"]
            rows.append({"method": method, "corruption": "all", "severity": sev,
                         **{k: float(np.mean([r[k] for r in sel])) for k in METRIC_KEYS}})
    return {"per_seed": per_seed, "rows": rows}


def exp_members_ablation(cfg, out_dir):
    bases = BaseCache(cfg)
    per_seed = []
    for seed in cfg.seeds:
        train, test = target_data(cfg, seed)
        entry = {"seed": seed, "members": {}}
        for m in cfg.sweep.members:
            model = train_method(arch_spec(cfg), bases.get(seed), train,
                                 train_config(cfg, seed, "sve", n_members=m))
            entry["members"][str(m)] = _metrics_dict(evaluate_model(model, test, seed=seed))
        per_seed.append(entry)
    rows = []
    for m in cfg.sweep.members:
        agg = aggregate_metrics([e["members"][str(m)] for e in per_seed])
        rows.append({"M": m, **{f"{k}_mean": v["mean"] for k, v in agg.items()},
                     **{f"{k}_std": v["std"] for k, v in agg.items()}})
    return {"per_seed": per_seed, "rows": rows}


def exp_backbone_quality(cfg, out_dir):
    bases = BaseCache(cfg)
    methods = _methods(cfg, ("sve", "deep_ensemble"))
    per_seed = []
    for seed in cfg.seeds:
        train, test = target_data(cfg, seed)
        entry = {"seed": seed, "arms": {}}
        for arm in cfg.sweep.arms:
            base = bases.get(seed, arm)
            entry["arms"][arm] = {}
            for method in methods:
                model = train_method(arch_spec(cfg), base, train, train_config(cfg, seed, method))
                r = evaluate_model(model, test, seed=seed)
                entry["arms"][arm][method] = {k: getattr(r, k) for k in METRIC_KEYS}
        per_seed.append(entry)
    rows = []
    for arm in cfg.sweep.arms:
        row = {"arm": arm}
        for method in methods:
            for k in ("accuracy", "ece"):
                row[f"{method}_{k}"] = float(np.mean([e["arms"][arm][method][k] for e in per_seed]))
        row["sve_minus_de_accuracy"] = float(np.mean(
            [e["arms"][arm]["sve"]["accuracy"] - e["arms"][arm]["deep_ensemble"]["accuracy"]
             for e in per_seed]))
        rows.append(row)
    return {"per_seed": per_seed, "rows": rows}


LAYER_GROUPS = {"q": "qkv", "k": "qkv", "v": "qkv", "o": "proj"}


def layer_group(name):
    if name in LAYER_GROUPS:
        return LAYER_GROUPS[name]
    return "fc" if name.startswith("fc") else name


def diversity_dump(checkpoint_path, top_k, out_dir, prefix="diversity"):
    """One CSV per layer group: rows are (layer, singular index), columns members."""
    model = load_checkpoint(checkpoint_path)
    if isinstance(model, DeepEnsemble) or not model.sve_layers():
        raise CapabilityError(f"{checkpoint_path} holds no SVE layers")
    groups = {}
    for layer in model.sve_layers():
        table = diversity_report(layer, min(top_k, layer.rank))
        for row, idx in enumerate(table.indices):
            rec = {"layer": layer.name, "index": int(idx)}
            for k in table.members:
                rec[f"member_{k}"] = float(table.percent[row, k])
            groups.setdefault(layer_group(layer.name), []).append(rec)
    paths = []
    for group, rows in groups.items():
        path = os.path.join(out_dir, f"{prefix}_{group}.csv")
        write_csv(path, rows)
        paths.append(path)
    return paths


def exp_diversity(cfg, out_dir):
    per_seed = []
    for seed in cfg.seeds:
        if cfg.eval.checkpoint:
            path = cfg.eval.checkpoint.format(seed=seed)
            if not os.path.exists(path):
                raise DependencyError(f"checkpoint {path} does not exist")
        else:
            train, _ = target_data(cfg, seed)
            model = train_method(arch_spec(cfg, train.dim), BaseCache(cfg).get(seed), train,
                                 train_config(cfg, seed, "sve"))
            path = os.path.join(out_dir, f"diversity_seed{seed}.ckpt")
            save_checkpoint(model, path, metadata={"stage": "diversity", "seed": seed})
        files = diversity_dump(path, cfg.sweep.top_k, out_dir, prefix=f"diversity_seed{seed}")
        model = load_checkpoint(path)
        per_seed.append({"seed": seed, "files": [os.path.basename(f) for f in files],
                         "diversity": diversity_tables(model, cfg.sweep.top_k)})
    return {"per_seed": per_seed}


RUNNERS = {
    "pretrain": exp_pretrain,
    "finetune": exp_finetune,
    "eval": exp_eval,
    "ood": exp_ood,
    "shift_sweep": exp_shift_sweep,
    "members_ablation": exp_members_ablation,
    "backbone_quality": exp_backbone_quality,
    "diversity": exp_diversity,
}


def _per_seed_rows(record):
    rows = []
    for e in record["per_seed"]:
        if "metrics" in e:
            rows.append({"seed": e["seed"], **{k: e["metrics"][k] for k in METRIC_KEYS}})
        elif "members" in e:
            for m, r in e["members"].items():
                rows.append({"seed": e["seed"], "M": m, **{k: r[k] for k in METRIC_KEYS}})
        elif "methods" in e:
            for m, r in e["methods"].items():
                rows.append({"seed": e["seed"], "method": m, **{k: r[k] for k in METRIC_KEYS},
                             **(r["ood"] or {})})
        elif "arms" in e:
            for arm, ms in e["arms"].items():
                for m, r in ms.items():
                    rows.append({"seed": e["seed"], "arm": arm, "method": m, **r})
        elif "results" in e:
            rows.extend({"seed": e["seed"], **r} for r in e["results"])
        else:
            rows.append({k: v for k, v in e.items() if not isinstance(v, (dict, list))})
    return rows


def run(cfg: ExperimentConfig, out_dir=None):
    """Execute ``cfg`` and write results files into ``out_dir``; returns the record."""
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    start = time.perf_counter()
    body = RUNNERS[cfg.experiment](cfg, out_dir)
    elapsed = time.perf_counter() - start
    record = {
        "experiment": cfg.experiment,
        "config_hash": cfg.hash(),
        "seeds": list(cfg.seeds),
        "rng_algorithm": ALGORITHM_ID,
        "code_version": __version__,
        "config": cfg.as_dict(),
        **body,
    }
    with open(os.path.join(out_dir, "results.json"), "w") as fh:
        fh.write(dumps(record) + "\n")
    write_csv(os.path.join(out_dir, "per_seed.csv"), _per_seed_rows(record))
    if "rows" in record:
        write_csv(os.path.join(out_dir, "plot_data.csv"), record["rows"])
    with open(os.path.join(out_dir, "timing.json"), "w") as fh:
        fh.write(dumps({"experiment": cfg.experiment, "seconds": elapsed}) + "\n")
    log.info("%s finished in %.1fs -> %s", cfg.experiment, elapsed, out_dir)
    return record
