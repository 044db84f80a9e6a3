"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v -s`` to see the lines inline; they
are also repeated in the terminal summary.
"""

import itertools
import logging
import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES
from hgch import geometry as geo
from hgch.diagnostics import toy_grad_check
from hgch.graph import INTERACTION, EmptyGraphError, Hcg, haversine_km, k_core, split
from hgch.metrics import evaluate_rankings, head_tail_partition, ndcg_at_k
from hgch.model import ModelConfig, forward_values, parameter_count
from hgch.synthetic import power_law_hcg, toy_hcg
from hgch.training import TrainConfig, _PositiveIndex, evaluate_split, sample_negatives, train
from test_graph import bipartite, naive_core
from test_metrics import naive_report

SEEDS = range(5)
# shared by the ablation and convergence criteria
RUN = {"lr": 0.01, "batch_size": 2048, "max_epochs": 60, "patience": 15}
BASE = {"sampling": "uniform", "init": "uniform", "aggregation": "tangent", "fusion": "none"}
FULL = {"sampling": "hyperbolic", "init": "power_law", "aggregation": "gyromidpoint", "fusion": "gate_prior"}


def verdict(number, name, ok, detail, gated=True):
    tag = ("PASS" if ok else "FAIL") if gated else ("PASS (logged)" if ok else "FAIL (logged)")
    line = f"[{tag}] criterion {number}: {name} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module", autouse=True)
def quiet():
    # zero-frequency clamps on synthetic graphs are expected
    logging.getLogger("hgch").setLevel(logging.ERROR)
    yield
    logging.getLogger("hgch").setLevel(logging.NOTSET)


@pytest.fixture(scope="module")
def datasets():
    return {s: split(power_law_hcg(n_users=500, n_items=800, exponent=1.1, seed=s), seed=s) for s in SEEDS}


def run_config(data, flags, seed, **overrides):
    """Train one configuration; returns (result, test NDCG@10)."""
    model_keys = {"init", "aggregation", "fusion"}
    mc = ModelConfig(dim=32, **{k: v for k, v in flags.items() if k in model_keys})
    tc = TrainConfig(seed=seed, sampling=flags["sampling"], **{**RUN, **overrides})
    res = train(data, mc, tc)
    final = forward_values(res.params, res.context, mc)
    head, _ = head_tail_partition(np.bincount(data.train[:, 1], minlength=data.n_items))
    rep = evaluate_split(final, data, "test", (10,), mc.score_curvature, head)
    return res, rep.get("ndcg", 10)


def test_criterion_1_geometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    v = rng.normal(size=(2000, 8))
    v *= (rng.uniform(0, 3, size=2000) / np.linalg.norm(v, axis=1))[:, None]
    roundtrip = float(np.max(np.abs(geo.log_o(geo.exp_o(v)) - v)))
    d = abs(float(geo.dist([0.5, 0.0], [-0.5, 0.0], 1.0)) - math.log(9.0))
    x = geo.exp_o(rng.normal(size=5))
    single = float(np.max(np.abs(geo.gyromidpoint(x[None]) - x)))
    antipodal = float(np.max(np.abs(geo.gyromidpoint(np.stack([x, -x])))))
    equi = 0.0
    for _ in range(100):
        a, b = geo.exp_o(rng.normal(size=(2, 4)))
        m = geo.gyromidpoint(np.stack([a, b]))
        equi = max(equi, abs(float(geo.dist(m, a) - geo.dist(m, b))))
    elapsed = time.perf_counter() - t0
    ok = roundtrip < 1e-9 and d < 1e-9 and single < 1e-12 and antipodal < 1e-12 and equi < 1e-9 and elapsed < 5
    detail = (
        f"roundtrip {roundtrip:.1e}, ln9 err {d:.1e}, single {single:.1e}, "
        f"antipodal {antipodal:.1e}, equidistance {equi:.1e}, {elapsed:.2f}s"
    )
    assert verdict(1, "geometry", ok, detail)


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    full = toy_hcg()
    two = Hcg(full.ids, {r: full.relations[r] for r in (INTERACTION, "friend")})
    worst, n = 0.0, 0
    for hcg in (two, full):
        for fusion in ("gate_prior", "gate", "prior"):
            mc = ModelConfig(dim=4, n_layers=3, init_scale=0.5, fusion=fusion)
            report = toy_grad_check(mc, TrainConfig(margin=0.5, alpha=0.5, n_neg=2), h=1e-6, tol=1e-4, hcg=hcg)
            worst = max(worst, report.max_rel_err)
            n += report.passed
    elapsed = time.perf_counter() - t0
    ok = n == 6 and worst < 1e-4 and elapsed < 30
    detail = f"{n}/6 passed, max relative error {worst:.2e}, {elapsed:.2f}s"
    assert verdict(2, "full-model gradient check", ok, detail)


def test_criterion_3_metric_oracle():
    rng = np.random.default_rng(11)
    mismatches = 0
    for _ in range(200):
        n_users, n_items = int(rng.integers(1, 6)), int(rng.integers(3, 15))
        k_max = int(rng.integers(1, n_items + 1))
        ks = sorted({int(rng.integers(1, k_max + 1)), k_max})
        ranked = np.array([rng.permutation(n_items)[:k_max] for _ in range(n_users)])
        relevant = [
            np.sort(rng.choice(n_items, size=rng.integers(0, min(5, n_items + 1)), replace=False))
            for _ in range(n_users)
        ]
        head = np.sort(rng.choice(n_items, size=rng.integers(1, n_items), replace=False))
        got = evaluate_rankings(ranked, relevant, ks, head=head, n_items=n_items).values
        ref = naive_report([r.tolist() for r in ranked], [set(r.tolist()) for r in relevant], ks, head.tolist())
        for key, value in ref.items():
            if not (got[key] == value or (math.isnan(got[key]) and math.isnan(value))):
                mismatches += 1
    rank2 = abs(ndcg_at_k([5, 1, 2], {1}, 10) - 1.0 / math.log2(3.0))
    ok = mismatches == 0 and rank2 < 1e-12
    assert verdict(3, "metric oracle", ok, f"{mismatches} mismatches over 200 cases, rank-2 err {rank2:.1e}")


def test_criterion_4_preprocessing():
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(50):
        edges = rng.integers(0, [15, 12], size=(rng.integers(20, 90), 2))
        cores = tuple(int(c) for c in rng.integers(1, 5, size=2))
        expected = {(f"u{u}", f"i{i}") for u, i in naive_core(edges, *cores)}
        try:
            out = k_core(bipartite(edges, 15, 12), *cores)
        except EmptyGraphError:
            bad += bool(expected)
            continue
        got = {(out.ids["user"][u], out.ids["item"][i]) for u, i in out.relations[INTERACTION].edges}
        again = k_core(out, *cores).relations[INTERACTION].edges
        bad += got != expected or not np.array_equal(again, out.relations[INTERACTION].edges)
    km = haversine_km(0.0, 0.0, 1.0, 0.0)
    conserved = True
    for seed in range(5):
        edges = np.unique(rng.integers(0, [40, 60], size=(800, 2)), axis=0)
        hcg = k_core(bipartite(edges, 40, 60), 2, 1)
        data = split(hcg, seed=seed)
        parts = np.concatenate([data.train, data.valid, data.test])
        whole = hcg.relations[INTERACTION].edges
        conserved &= len(parts) == len(whole) and {tuple(e) for e in parts} == {tuple(e) for e in whole}
    ten = split(bipartite([[0, i] for i in range(10)]), seed=0, valid_ratio=0.0)
    conserved &= (len(ten.train), len(ten.test)) == (8, 2)
    ok = bad == 0 and abs(km - 111.195) < 1e-3 and conserved
    detail = f"k-core {50 - bad}/50 fixpoints, 1 deg latitude {km:.4f} km, split conservation {conserved}"
    assert verdict(4, "preprocessing", ok, detail)


def test_criterion_5_sampling_hardness():
    rng = np.random.default_rng(5)
    n_users, n_items, draws = 100, 1000, 100
    ball = geo.exp_o(rng.normal(size=(n_users + n_items, 16)) * 0.3)
    users_ball, items_ball = ball[:n_users], ball[n_users:]
    pos = np.stack([np.repeat(np.arange(n_users), 5), rng.integers(0, n_items, 5 * n_users)], axis=1)
    index = _PositiveIndex(pos[:, 0], pos[:, 1], n_items)
    anchors = np.repeat(np.arange(n_users), draws)  # N = 10^4
    dists = {}
    for n_neg in (20, 1):
        neg = sample_negatives(anchors, index, n_items, n_neg, rng, users_ball, items_ball, 1.0)
        dists[n_neg] = geo.dist(users_ball[anchors], items_ball[neg], 1.0)
    test = stats.ttest_ind(dists[20], dists[1], equal_var=False, alternative="less")
    ok = dists[20].mean() < dists[1].mean() and test.pvalue < 0.01
    detail = f"mean dist {dists[20].mean():.4f} (n_neg=20) vs {dists[1].mean():.4f} (n_neg=1), p={test.pvalue:.1e}"
    assert verdict(5, "sampling hardness", ok, detail)


def convergence_epoch(curve, fraction=0.9):
    curve = np.asarray(curve)
    return int(np.argmax(curve >= fraction * curve.max())) + 1


def test_criterion_6_convergence_trend(datasets):
    # fixed budget without early stopping so the plateau is well defined
    epochs = {"hyperbolic": [], "uniform": []}
    for seed in SEEDS:
        for sampling in epochs:
            res, _ = run_config(
                datasets[seed], {**FULL, "sampling": sampling}, seed, lr=0.005, max_epochs=30, patience=30
            )
            epochs[sampling].append(convergence_epoch([h["val_ndcg@10"] for h in res.history]))
    med = {s: float(np.median(v)) for s, v in epochs.items()}
    ok = med["hyperbolic"] < med["uniform"]
    detail = f"median epoch to 90% plateau {med['hyperbolic']} (hyperbolic) vs {med['uniform']} (uniform), {epochs}"
    verdict(6, "convergence trend", ok, detail, gated=False)


def test_criterion_7_ablation(datasets):
    names = ("sampling", "init", "aggregation", "fusion")
    t0 = time.perf_counter()
    scores = {}
    for combo in itertools.product(*[(BASE[n], FULL[n]) for n in names]):
        flags = dict(zip(names, combo))
        _, ndcg = run_config(datasets[0], flags, 0)
        scores[combo] = ndcg
        assert np.isfinite(ndcg)
    grid_seconds = time.perf_counter() - t0
    base = [scores[tuple(BASE[n] for n in names)]]
    full = [scores[tuple(FULL[n] for n in names)]]
    for seed in list(SEEDS)[1:]:
        base.append(run_config(datasets[seed], BASE, seed)[1])
        full.append(run_config(datasets[seed], FULL, seed)[1])
    ok = len(scores) == 16 and grid_seconds < 600 and np.median(full) >= np.median(base)
    detail = (
        f"16 configurations in {grid_seconds:.0f}s; median test NDCG@10 {np.median(full):.4f} (full) "
        f"vs {np.median(base):.4f} (base); full {np.round(full, 4).tolist()}, base {np.round(base, 4).tolist()}"
    )
    assert verdict(7, "ablation separability", ok, detail)


def expected_gate_pairs(hcg, fusion):
    """Count (node type, subspace) pairs from relation endpoint types."""
    if fusion in ("none", "prior"):
        return 0
    pairs = {("user", INTERACTION), ("item", INTERACTION)}
    for name, rel in hcg.relations.items():
        if len(rel.edges):
            pairs |= {(rel.src_type, name), (rel.dst_type, name)}
    return len(pairs)


def test_criterion_8_parameter_count(datasets):
    data = datasets[0]
    rows = []
    ok = True
    for fusion in ("none", "gate", "prior", "gate_prior"):
        for d in (2, 8):
            res = train(data, ModelConfig(dim=d, fusion=fusion), TrainConfig(max_epochs=1), validate=False)
            hcg = data.train_graph()
            expected = hcg.n_nodes * d + expected_gate_pairs(hcg, fusion) * d * d
            ok &= parameter_count(res.params) == expected
            rows.append(f"{fusion}/d={d}: {parameter_count(res.params)}")
    assert verdict(8, "parameter accounting", ok, ", ".join(rows))
