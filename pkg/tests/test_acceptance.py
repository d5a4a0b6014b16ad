"""The twelve acceptance criteria, each at its stated tolerance and time budget.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
prints one PASS/FAIL line per criterion. The trend criteria (7 to 10) train
real models on the synthetic task and take several minutes each.
"""

import os
import time
from dataclasses import replace

import numpy as np
import pytest

from sve import tensor as T
from sve.checkpoint import load_checkpoint, save_checkpoint
from sve.config import load_config
from sve.data import TaskSpec, sample
from sve.experiments import diversity_dump, run
from sve.layers import SveConfig, diversity_report, overhead_stats
from sve.metrics import auprc, auroc, brier, ece, fpr_at_tpr, nll
from sve.models import _mlp_features, mlp_model, predict, transformer_block_model
from sve.rng import Rng
from sve.svd import reconstruct, svd
from sve.tensor import grad_check
from sve.training import ArchSpec, TrainConfig, joint_loss, train_method, train_single

CONFIG = os.path.join(os.path.dirname(__file__), "configs", "acceptance.toml")

pytestmark = pytest.mark.acceptance


def trend_config(experiment, **sweep):
    cfg = load_config(CONFIG)
    cfg.experiment = experiment
    for key, value in sweep.items():
        setattr(cfg.sweep, key, value)
    return cfg


def inversions(values, non_increasing):
    steps = np.diff(values)
    return int(np.sum(steps > 0)) if non_increasing else int(np.sum(steps < 0))


# 1 ---------------------------------------------------------------------------

def test_01_svd_correctness(acceptance_record):
    rng = Rng(2024).split("acceptance/svd")
    shapes = rng.integers(1, 65, (200, 2))
    worst = {"recon": 0.0, "orth": 0.0, "gram": 0.0}
    start = time.perf_counter()
    for m, n in shapes:
        w = rng.normal((int(m), int(n)))
        f = svd(w)
        r = min(m, n)
        worst["recon"] = max(worst["recon"], np.linalg.norm(reconstruct(f) - w) / np.linalg.norm(w))
        worst["orth"] = max(worst["orth"], np.abs(f.u.T @ f.u - np.eye(r)).max(),
                            np.abs(f.vt @ f.vt.T - np.eye(r)).max())
        gram = w.T @ w if m >= n else w @ w.T
        eig = np.sort(np.linalg.eigvalsh(gram))[::-1]
        worst["gram"] = max(worst["gram"], np.abs(f.sigma ** 2 - eig).max())
    elapsed = time.perf_counter() - start
    passed = worst["recon"] <= 1e-10 and worst["orth"] <= 1e-10 and worst["gram"] <= 1e-8 and elapsed < 30
    acceptance_record(1, "SVD correctness", passed,
                      f"recon {worst['recon']:.1e}, orth {worst['orth']:.1e}, "
                      f"gram {worst['gram']:.1e}, {elapsed:.1f}s")
    assert passed


# 2 ---------------------------------------------------------------------------

def test_02_gradient_fidelity(acceptance_record):
    start = time.perf_counter()
    errors = {}
    cfg = SveConfig(3, 0.05)
    models = {
        "mlp": (mlp_model([12, 16, 10], 4, cfg, rng=Rng(0)), 12),
        "transformer": (transformer_block_model(8, 2, 16, 4, cfg, rng=Rng(1), seq_len=4), 32),
    }
    for name, (model, dim) in models.items():
        rng = Rng(5).split(name)
        x = rng.normal((8, dim))
        y = rng.integers(0, 4, 8)
        errors[name] = grad_check(lambda: joint_loss(model, x, y), model.parameters(), h=1e-5,
                                  n_probe=100, rng=rng.split("probe"))
    elapsed = time.perf_counter() - start
    passed = max(errors.values()) <= 1e-4 and elapsed < 60
    acceptance_record(2, "gradient fidelity", passed,
                      f"mlp {errors['mlp']:.1e}, transformer {errors['transformer']:.1e}, {elapsed:.1f}s")
    assert passed


# 3 ---------------------------------------------------------------------------

def test_03_svf_reduction(acceptance_record):
    spec = TaskSpec(n_classes=4, dim=10, signal_dim=2, spread=0.3, geometry_seed=3)
    data = sample(spec, 40, 0, "target")
    arch = ArchSpec("mlp", (10, 16, 12), 4)
    base = [(Rng(7).split(f"w{i}").normal((o, i_)), Rng(7).split(f"b{i}").normal(o))
            for i, (i_, o) in enumerate([(10, 16), (16, 12)])]
    cfg = TrainConfig(iterations=200, lr=2e-2, weight_decay=0.05, seed=11, n_members=1, sigma_init=0.01)
    _, sve_hist = train_single(arch, base, data, replace(cfg, method="sve"))
    _, svf_hist = train_single(arch, base, data, replace(cfg, method="svf"))
    diff = float(np.max(np.abs(np.subtract(sve_hist.step_loss, svf_hist.step_loss))))
    passed = len(sve_hist.step_loss) == 200 and diff <= 1e-12
    acceptance_record(3, "SVF reduction", passed, f"max per-step loss difference {diff:.1e} over 200 steps")
    assert passed


# 4 ---------------------------------------------------------------------------

def test_04_zero_noise_identity(acceptance_record):
    cfg = SveConfig(4, 0.0)
    model = mlp_model([12, 16, 10], 5, cfg, rng=Rng(3))
    x = Rng(4).normal((20, 12))
    with T.no_grad():
        feats = [_mlp_features(model, k, x, 0.0, None).data for k in range(4)]
    backbone_equal = all(np.array_equal(f, feats[0]) for f in feats)
    sigma_equal = all(np.array_equal(s.data, layer.sigma_pretrained)
                      for layer in model.sve_layers() for s in layer.sigma_members)
    # heads are the only per-member parameters left; tie them to isolate the backbone
    for head in model.heads[1:]:
        head.weight.data[:] = model.heads[0].weight.data
        head.bias.data[:] = model.heads[0].bias.data
    pb = predict(model, x)
    members_equal = all(np.array_equal(p, pb.member_probs[0]) for p in pb.member_probs)
    mean_equal = all(np.array_equal(pb.mean_probs, p) for p in pb.member_probs)
    passed = backbone_equal and sigma_equal and members_equal and mean_equal
    acceptance_record(4, "zero-noise identity", passed,
                      f"backbones equal {backbone_equal}, members equal {members_equal}, "
                      f"mean equals member {mean_equal}")
    assert passed


# 5 ---------------------------------------------------------------------------

def test_05_parameter_accounting(acceptance_record):
    start = time.perf_counter()
    ok = True
    M, C = 4, 5
    mlp = mlp_model([12, 16, 10], C, SveConfig(M, 0.01), rng=Rng(0))
    expected = M * (min(16, 12) + min(10, 16)) + M * (10 * C + C)
    ok &= mlp.n_trainable() == expected
    d = 8
    block = transformer_block_model(d, 2, 4 * d, C, SveConfig(M, 0.01), rng=Rng(1))
    shapes = [l.shape for l in block.sve_layers()]
    stats = overhead_stats(shapes, d, M, (d, C))
    ok &= block.n_trainable() == stats["trainable_total"] == M * 6 * d + M * (d * C + C)
    d = 768
    big = overhead_stats([(d, d)] * 4 + [(4 * d, d), (d, 4 * d)], d, M, (d, 1000))
    pct = 100 * big["overhead_approx"]
    in_band = 0.2 <= round(pct, 1) <= 1.0
    ok &= abs(pct - 0.1953125) < 1e-12 and in_band
    elapsed = time.perf_counter() - start
    passed = bool(ok) and elapsed < 1
    acceptance_record(5, "parameter accounting", passed,
                      f"counts exact, approx overhead {pct:.4f}% (rounds to {round(pct, 1)}%), {elapsed:.2f}s")
    assert passed


# 6 ---------------------------------------------------------------------------

def _oracle_ece(probs, labels, n_bins=15):
    total = 0.0
    n = len(labels)
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = []
        for p, y in zip(probs, labels):
            conf = max(p)
            if lo < conf <= hi or (b == 0 and conf == 0):
                members.append((conf, float(list(p).index(conf) == y)))
        if members:
            total += len(members) / n * abs(sum(a for _, a in members) / len(members)
                                            - sum(c for c, _ in members) / len(members))
    return total


def _oracle_curve(pos, neg):
    pos_sorted = sorted(pos)
    neg_sorted = sorted(neg)
    import bisect
    rows = []
    for t in sorted(set(pos) | set(neg), reverse=True):
        tp = len(pos_sorted) - bisect.bisect_left(pos_sorted, t)
        fp = len(neg_sorted) - bisect.bisect_left(neg_sorted, t)
        rows.append((tp, fp))
    return rows


def test_06_metric_oracles(acceptance_record):
    start = time.perf_counter()
    rng = Rng(6).split("acceptance/metrics")
    n, c = 1000, 10
    z = rng.normal((n, c)) * 2
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    labels = rng.integers(0, c, n)
    pos = np.round(rng.uniform(n), 3)
    neg = np.round(rng.uniform(n) * 0.8, 3)
    plist, llist = probs.tolist(), labels.tolist()
    errs = {}
    errs["ece"] = abs(ece(probs, labels, 15)[0] - _oracle_ece(plist, llist))
    errs["nll"] = abs(nll(probs, labels) - (-sum(np.log(max(p[y], 1e-12)) for p, y in zip(plist, llist)) / n))
    errs["brier"] = abs(brier(probs, labels) - sum(
        sum((p[k] - (k == y)) ** 2 for k in range(c)) for p, y in zip(plist, llist)) / n)
    pairwise = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos.tolist() for b in neg.tolist())
    errs["auroc"] = abs(auroc(pos, neg) - pairwise / (n * n))
    curve = _oracle_curve(pos.tolist(), neg.tolist())
    area, prev = 0.0, 0.0
    fpr95 = None
    for tp, fp in curve:
        area += (tp / n - prev) * tp / (tp + fp)
        prev = tp / n
        if fpr95 is None and tp / n >= 0.95:
            fpr95 = fp / n
    errs["auprc"] = abs(auprc(pos, neg) - area)
    errs["fpr95"] = abs(fpr_at_tpr(pos, neg, 0.95) - fpr95)
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    passed = worst <= 1e-12 and elapsed < 10
    acceptance_record(6, "metric oracles", passed, f"max error {worst:.1e} over {sorted(errs)}, {elapsed:.1f}s")
    assert passed


# 7 ---------------------------------------------------------------------------

def test_07_calibration_trend(acceptance_record, tmp_path):
    cfg = trend_config("backbone_quality", arms=["strong"], methods=["single", "sve", "deep_ensemble"])
    start = time.perf_counter()
    rec = run(cfg, str(tmp_path))
    elapsed = time.perf_counter() - start
    row = rec["rows"][0]
    gap = row["sve_accuracy"] - row["deep_ensemble_accuracy"]
    passed = row["sve_ece"] <= row["single_ece"] and abs(gap) <= 0.02 and elapsed < 600
    acceptance_record(7, "calibration trend", passed,
                      f"ECE sve {row['sve_ece']:.4f} vs single {row['single_ece']:.4f}; "
                      f"acc sve {row['sve_accuracy']:.4f} vs DE {row['deep_ensemble_accuracy']:.4f}; "
                      f"{elapsed:.0f}s")
    assert passed


# 8 ---------------------------------------------------------------------------

def test_08_backbone_quality_trend(acceptance_record, tmp_path):
    cfg = trend_config("backbone_quality", arms=["random", "weak", "strong"], methods=["sve", "deep_ensemble"])
    start = time.perf_counter()
    rec = run(cfg, str(tmp_path))
    elapsed = time.perf_counter() - start
    rows = {r["arm"]: r for r in rec["rows"]}
    lift = rows["strong"]["sve_accuracy"] - rows["random"]["sve_accuracy"]
    gaps = [rows[a]["sve_minus_de_accuracy"] for a in ("random", "weak", "strong")]
    inv = inversions(gaps, non_increasing=False)
    passed = lift >= 0.03 and inv <= 1 and elapsed < 900
    acceptance_record(8, "backbone-quality trend", passed,
                      f"strong-random SVE lift {100 * lift:.2f} pts; SVE-DE gaps "
                      f"{[round(100 * g, 2) for g in gaps]} pts ({inv} inversions); {elapsed:.0f}s")
    assert passed


# 9 ---------------------------------------------------------------------------

def test_09_ensemble_size_trend(acceptance_record, tmp_path):
    cfg = trend_config("members_ablation", members=[1, 2, 4, 8])
    start = time.perf_counter()
    rec = run(cfg, str(tmp_path))
    elapsed = time.perf_counter() - start
    eces = [r["ece_mean"] for r in rec["rows"]]
    inv = inversions(eces, non_increasing=True)
    passed = inv <= 1 and elapsed < 900
    acceptance_record(9, "ensemble-size trend", passed,
                      f"mean ECE for M=1,2,4,8: {[round(e, 4) for e in eces]} ({inv} inversions); {elapsed:.0f}s")
    assert passed


# 10 --------------------------------------------------------------------------

def test_10_shift_robustness(acceptance_record, tmp_path):
    cfg = trend_config("shift_sweep", methods=["single", "sve"], severities=[1, 2, 3, 4, 5])
    start = time.perf_counter()
    rec = run(cfg, str(tmp_path))
    elapsed = time.perf_counter() - start
    curve = {(r["method"], r["severity"]): r["ece"] for r in rec["rows"] if r["corruption"] == "all"}
    adv = {s: curve[("single", s)] - curve[("sve", s)] for s in range(1, 6)}
    passed = adv[5] >= adv[1] and elapsed < 600
    acceptance_record(10, "shift robustness", passed,
                      f"ECE advantage of SVE by severity {[round(adv[s], 4) for s in range(1, 6)]}; {elapsed:.0f}s")
    assert passed


# 11 --------------------------------------------------------------------------

def test_11_diversity_emergence(acceptance_record, tmp_path):
    cfg = load_config(CONFIG)
    spec = TaskSpec(n_classes=cfg.data.n_classes, dim=cfg.data.dim, signal_dim=cfg.data.signal_dim,
                    modes=cfg.data.modes, spread=cfg.data.spread, geometry_seed=cfg.data.geometry_seed)
    train, test = sample(spec, 100, 0, "target"), sample(spec, 100, 0, "test")
    arch = ArchSpec("mlp", (cfg.data.dim, 32, 32), cfg.data.n_classes)
    model = train_method(arch, None, train, TrainConfig(epochs=10, lr=5e-2, weight_decay=0.0, seed=0,
                                                        method="sve", n_members=4, sigma_init=0.01))
    distances = {}
    for layer in model.sve_layers():
        sig = [s.data for s in layer.sigma_members]
        distances[layer.name] = min(np.linalg.norm(a - b) / np.linalg.norm(a)
                                    for i, a in enumerate(sig) for b in sig[i + 1:])
    preds = np.argmax(predict(model, test.x).member_probs, axis=2)
    disagreement = float(np.mean([np.mean(preds[i] != preds[j])
                                  for i in range(4) for j in range(i + 1, 4)]))
    path = tmp_path / "div.ckpt"
    save_checkpoint(model, path)
    diversity_dump(str(path), 8, str(tmp_path), prefix="d")
    import csv
    worst = 0.0
    for layer in model.sve_layers():
        table = diversity_report(layer, 8)
        rows = [r for r in csv.DictReader(open(tmp_path / "d_fc.csv")) if r["layer"] == layer.name]
        dumped = np.array([[float(r[f"member_{k}"]) for k in range(4)] for r in rows])
        worst = max(worst, np.abs(dumped - table.percent).max())
    passed = min(distances.values()) > 0 and disagreement > 0 and worst <= 1e-12
    acceptance_record(11, "diversity emergence", passed,
                      f"min pairwise sigma distance {min(distances.values()):.2e}, "
                      f"disagreement {disagreement:.4f}, dump error {worst:.1e}")
    assert passed


# 12 --------------------------------------------------------------------------

def test_12_determinism_and_persistence(acceptance_record, tmp_path):
    cfg = load_config(CONFIG)
    cfg.experiment = "finetune"
    cfg.seeds = [3]
    cfg.train.epochs = 3
    cfg.pretrain.epochs = 3
    run(cfg, str(tmp_path / "a"))
    run(cfg, str(tmp_path / "b"))
    same_json = (tmp_path / "a" / "results.json").read_bytes() == (tmp_path / "b" / "results.json").read_bytes()
    ckpt = tmp_path / "a" / "finetune_sve_seed3.ckpt"
    same_ckpt = ckpt.read_bytes() == (tmp_path / "b" / "finetune_sve_seed3.ckpt").read_bytes()
    model = load_checkpoint(ckpt)
    resaved = tmp_path / "again.ckpt"
    save_checkpoint(model, resaved, metadata=load_checkpoint(ckpt, return_header=True)[1]["metadata"])
    bitwise = resaved.read_bytes() == ckpt.read_bytes()
    x = sample(TaskSpec(n_classes=8, dim=32, signal_dim=4, modes=2, spread=0.25, geometry_seed=7), 20, 5).x
    same_pred = np.array_equal(predict(model, x).mean_probs, predict(load_checkpoint(resaved), x).mean_probs)
    passed = same_json and same_ckpt and bitwise and same_pred
    acceptance_record(12, "determinism and persistence", passed,
                      f"results.json identical {same_json}, checkpoint round-trip bitwise {bitwise}, "
                      f"predictions identical {same_pred}")
    assert passed
