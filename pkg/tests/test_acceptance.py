"""End-to-end acceptance gates.

Each test exercises one documented guarantee at its stated tolerance
and runtime budget and prints one PASS line (run with `pytest -s` to
see them). The toy-scale experiments mirror the workflow the package
exists for: pretrain dense, split into experts, fine-tune an adapter
with expert masking against a frozen backbone, merge back for dense
deployment.
"""

import time
from itertools import combinations

import numpy as np
import pytest

from emoe import (
    Partition,
    SelectionPolicy,
    activation_ratios,
    balanced_kmeans,
    ffn_forward,
    gate_scores,
    merge,
    partition_objective,
    pre_activations,
    random_partition,
    select_experts,
    split,
)
from emoe.cli import run as cli_run
from emoe.moe import GateMode, emoe_forward
from emoe.numerics import make_rng
from emoe.train import (
    Adapter,
    ToyTaskSpec,
    TrainConfig,
    build_toy_model,
    clone_model,
    cluster_partitions,
    convert_emoe2lora,
    convert_lora2emoe,
    evaluate_accuracy,
    finite_diff_check,
    forward_batch,
    kink_margins,
    make_toy_dataset,
    model_backward,
    softmax_cross_entropy,
    train,
)

from conftest import random_layer


def report(name, start, budget, detail=""):
    elapsed = time.time() - start
    assert elapsed < budget, f"{name} exceeded {budget}s budget ({elapsed:.1f}s)"
    suffix = f" ({detail})" if detail else ""
    print(f"PASS {name}: {elapsed:.2f}s{suffix}")


def random_split_instance(rng, trial, dtype):
    h = int(rng.integers(4, 17))
    d = 4 * h
    n = int(rng.choice([n for n in (1, 2, 4, 8, h) if d % n == 0]))
    layer = random_layer(rng, h, d, dtype=dtype)
    partition = random_partition(d, n, seed=trial)
    x = rng.normal(size=h).astype(dtype)
    return layer, partition, x, n


def test_dense_equivalence():
    start = time.time()
    for dtype, tol in ((np.float32, 1e-5), (np.float64, 1e-12)):
        rng = make_rng(101)
        worst = 0.0
        for trial in range(100):
            layer, partition, x, n = random_split_instance(rng, trial, dtype)
            em = split(layer, partition, top_k=n)
            got, selected = emoe_forward(em, x, SelectionPolicy.top_k(), n)
            assert selected.tolist() == list(range(n))
            want = ffn_forward(layer, x)
            denom = max(float(np.abs(want).max()), 1e-12)
            worst = max(worst, float(np.abs(got - want).max()) / denom)
        assert worst <= tol, f"{dtype}: max relative error {worst}"
    report("dense-equivalence", start, 5.0)


def test_gate_score_identity():
    # float64 instances: the identity is algebraic, and per-expert sums
    # with mixed signs cancel too hard for a 1e-6 check in float32
    start = time.time()
    rng = make_rng(202)
    worst = 0.0
    for trial in range(100):
        layer, partition, x, n = random_split_instance(rng, trial, np.float64)
        em = split(layer, partition, top_k=1)
        got = gate_scores(em, x)
        pre = pre_activations(layer, x)
        want = np.array(
            [(n / layer.d) * pre[partition.members(i)].sum() for i in range(n)]
        )
        denom = max(float(np.abs(want).max()), 1e-12)
        worst = max(worst, float(np.abs(got - want).max()) / denom)
    assert worst <= 1e-6, f"max relative error {worst}"
    report("gate-score-identity", start, 2.0)


def test_merge_round_trip():
    start = time.time()
    rng = make_rng(303)
    for trial in range(100):
        layer, partition, _, n = random_split_instance(rng, trial, np.float32)
        em = split(layer, partition, top_k=1)
        if trial % 2 == 1:  # half the cases merge after in-place mutation
            expert = em.experts[int(rng.integers(n))]
            i = int(rng.integers(expert.v_sub.shape[0]))
            j = int(rng.integers(expert.v_sub.shape[1]))
            expert.v_sub[i, j] = np.float32(rng.normal())
            em.refresh_gate()
            back = merge(em)
            orig_neuron = int(expert.neuron_indices[i])
            assert back.v[orig_neuron, j] == expert.v_sub[i, j]
            mask = np.ones(layer.d, dtype=bool)
            mask[orig_neuron] = False
            assert np.array_equal(back.v[mask], layer.v[mask])
            assert np.array_equal(back.k, layer.k)
        else:
            back = merge(em)
            assert np.array_equal(back.k, layer.k)
            assert np.array_equal(back.v, layer.v)
            assert np.array_equal(back.b_k, layer.b_k)
            assert np.array_equal(back.b_v, layer.b_v)
    report("merge-round-trip", start, 2.0)


def enumerate_balanced(d, n):
    m = d // n

    def rec(remaining):
        if not remaining:
            yield []
            return
        first, rest = remaining[0], remaining[1:]
        for others in combinations(rest, m - 1):
            group = (first,) + others
            left = [i for i in rest if i not in others]
            for tail in rec(left):
                yield [group] + tail

    yield from rec(list(range(d)))


def test_balanced_clustering():
    start = time.time()
    rng = make_rng(404)

    # balance + monotone objective on assorted instances
    for trial in range(50):
        n = int(rng.choice([1, 2, 3, 4, 8]))
        m = int(rng.integers(1, 6))
        pts = rng.normal(size=(n * m, int(rng.integers(1, 5))))
        partition, rep = balanced_kmeans(pts, n, seed=trial)
        assert np.all(np.bincount(partition.assignment, minlength=n) == m)
        assert np.all(np.diff(rep.objective_per_iteration) <= 0)

    # exact recovery of the brute-force optimum on well-separated instances
    recovered = 0
    for trial in range(20):
        n = int(rng.choice([2, 3]))
        m = int(rng.integers(2, 12 // n + 1))
        h = int(rng.integers(1, 4))
        centers = rng.normal(size=(n, h)) * 10.0
        while min(
            np.linalg.norm(a - b) for i, a in enumerate(centers) for b in centers[i + 1:]
        ) < 2.0:
            centers = rng.normal(size=(n, h)) * 10.0
        pts = np.concatenate(
            [centers[i] + 0.05 * rng.normal(size=(m, h)) for i in range(n)]
        )
        order = rng.permutation(n * m)
        pts = pts[order]
        partition, rep = balanced_kmeans(pts, n, seed=trial)
        got = partition_objective(pts, partition)
        best = min(
            partition_objective(pts, groups_to_partition(g, n))
            for g in enumerate_balanced(n * m, n)
        )
        assert got == pytest.approx(best, rel=1e-12), f"trial {trial}"
        recovered += 1
    assert recovered == 20
    report("balanced-clustering", start, 10.0, "20/20 optima recovered")


def groups_to_partition(groups, n):
    d = sum(len(g) for g in groups)
    assignment = np.empty(d, dtype=np.int64)
    for i, group in enumerate(groups):
        for j in group:
            assignment[j] = i
    return Partition(assignment=assignment, n_experts=n)


def test_ratio_complementarity():
    start = time.time()
    rng = make_rng(505)
    checked = 0
    while checked < 100:
        h = int(rng.integers(4, 10))
        n = int(rng.choice([2, 4, 8]))
        d = n * int(rng.integers(1, 5))
        layer = random_layer(rng, h, d)
        partition = random_partition(d, n, seed=checked)
        em = split(layer, partition, top_k=1)
        x = rng.normal(size=h)
        ratios = activation_ratios(layer, partition, x, np.arange(n))
        if ratios.activated_total == 0:
            continue
        scores = gate_scores(em, x)
        k = int(rng.integers(1, n))
        top = select_experts(scores, SelectionPolicy.top_k(), k)
        nottop = select_experts(scores, SelectionPolicy.not_top_k(), k)
        r_top = activation_ratios(layer, partition, x, top)
        r_not = activation_ratios(layer, partition, x, nottop)
        assert abs(r_top.plain + r_not.plain - 1.0) <= 1e-6
        assert abs(r_top.weighted + r_not.weighted - 1.0) <= 1e-6
        if k <= n - k:
            bottom = select_experts(scores, SelectionPolicy.bottom_k(), k)
            assert set(bottom.tolist()) <= set(nottop.tolist())
            r_bot = activation_ratios(layer, partition, x, bottom)
            assert r_bot.plain <= r_not.plain + 1e-12
        checked += 1
    report("ratio-complementarity", start, 2.0)


def margin_safe_batch(model, seed, policy=None, k=None, tol=1e-3):
    rng = make_rng(seed)
    for _ in range(500):
        x = rng.normal(size=(4, model.h_in))
        y = rng.integers(0, model.n_classes, size=4)
        pre, gap = kink_margins(model, x, policy, k)
        if pre > tol and gap > tol:
            return x, y
    raise RuntimeError("no margin-safe batch found")


def test_gradient_correctness():
    start = time.time()
    pol = SelectionPolicy.top_k()

    dense = build_toy_model(h_in=6, h=8, d=16, n_classes=3, seed=1, n_blocks=2)
    assert finite_diff_check(dense, margin_safe_batch(dense, 10), 1e-5) <= 1e-4

    avgk = build_toy_model(h_in=6, h=8, d=16, n_classes=3, seed=2, n_blocks=2)
    convert_lora2emoe(avgk, [random_partition(16, 4, seed=3),
                             random_partition(16, 4, seed=4)], k=2)
    assert finite_diff_check(avgk, margin_safe_batch(avgk, 11, pol, 2), 1e-5, pol, 2) <= 1e-4

    learned = build_toy_model(h_in=6, h=8, d=16, n_classes=3, seed=5, n_blocks=2)
    convert_lora2emoe(learned, [random_partition(16, 4, seed=6),
                                random_partition(16, 4, seed=7)], k=2,
                      gate_mode=GateMode.LEARNED)
    batch = margin_safe_batch(learned, 12, pol, 2, tol=5e-3)
    assert finite_diff_check(learned, batch, 3e-4, pol, 2) <= 1e-4

    adapter = build_toy_model(h_in=6, h=8, d=16, n_classes=3, seed=8, n_blocks=2,
                              adapter_rank=3, trainable={"adapter", "head"})
    adapter.adapter.b[:] = make_rng(9).normal(0, 0.1, size=adapter.adapter.b.shape)
    assert finite_diff_check(adapter, margin_safe_batch(adapter, 13), 1e-5) <= 1e-4

    # unselected experts must get exactly zero gradient
    x = make_rng(14).normal(size=(1, 6))
    logits, cache = forward_batch(avgk, x, pol, 1)
    _, dlogits = softmax_cross_entropy(logits, np.array([0]))
    grads = model_backward(avgk, cache, dlogits)
    for b, bc in enumerate(cache.blocks):
        selected = set(bc.selected[0].tolist())
        for j in range(4):
            if j not in selected:
                assert np.all(grads[f"blocks.{b}.experts.{j}.k"] == 0)
                assert np.all(grads[f"blocks.{b}.experts.{j}.v"] == 0)
    report("gradient-correctness", start, 30.0)


# --- shared toy-workflow harness -------------------------------------------

TASK = dict(n_clusters=8, h_in=16, n_classes=8, noise_sigma=0.25,
            samples_per_cluster=40)
MODEL = dict(h_in=16, h=16, d=64, n_classes=8, residual=False)
N_EXPERTS = 8
TOP_K = 2
SEEDS = (1, 2, 3, 4, 5)


def pretrained_base(seed, steps=1500):
    ds = make_toy_dataset(ToyTaskSpec(seed=seed, **TASK))
    base = build_toy_model(seed=seed + 1000, **MODEL)
    base, _ = train(base, ds, TrainConfig(steps=steps, batch_size=16,
                                          learning_rate=0.01, seed=seed + 2000))
    return ds, base


def attach_frozen_adapter(model, seed):
    rng = make_rng(seed + 7000)
    model.adapter = Adapter(a=rng.normal(0, 0.25, size=(4, model.h_in)),
                            b=np.zeros((model.h, 4)), rank=4, scale=8.0)
    model.trainable = frozenset({"adapter", "head"})
    return model


def finetune(model, ds, seed, policy=None, k=None, steps=400):
    cfg = TrainConfig(steps=steps, batch_size=16, learning_rate=0.01,
                      seed=seed + 3000, policy=policy or SelectionPolicy.top_k(), k=k)
    return train(model, ds, cfg)


def masked_branch(base, ds, partitions, policy, seed, gate_mode=GateMode.AVG_K):
    m = clone_model(base)
    convert_lora2emoe(m, partitions, k=TOP_K, gate_mode=gate_mode)
    attach_frozen_adapter(m, seed)
    return finetune(m, ds, seed, policy, TOP_K)


def test_directional_toy_replication():
    start = time.time()
    accs = {"dense": [], "top": [], "bottom": []}
    for seed in SEEDS:
        ds, base = pretrained_base(seed)
        dense = attach_frozen_adapter(clone_model(base), seed)
        _, dlog = finetune(dense, ds, seed)
        accs["dense"].append(dlog.test_accuracy)
        parts = cluster_partitions(base, N_EXPERTS, seed=seed + 4000)
        for name, policy in (("top", SelectionPolicy.top_k()),
                             ("bottom", SelectionPolicy.bottom_k())):
            _, log = masked_branch(base, ds, parts, policy, seed)
            accs[name].append(log.test_accuracy)
    med = {k: float(np.median(v)) for k, v in accs.items()}
    assert med["top"] >= med["bottom"], med
    assert med["top"] >= med["dense"] - 0.02, med
    report("directional-toy-replication", start, 300.0,
           f"median top {med['top']:.3f} bottom {med['bottom']:.3f} "
           f"dense {med['dense']:.3f}")


def test_emoe2lora_workflow():
    start = time.time()
    seed = SEEDS[0]
    ds, base = pretrained_base(seed)
    parts = cluster_partitions(base, N_EXPERTS, seed=seed + 4000)
    model, _ = masked_branch(base, ds, parts, SelectionPolicy.top_k(), seed)
    snapshot = clone_model(model)

    rng = make_rng(seed + 2000)
    n = ds.x.shape[0]
    test_idx = rng.permutation(n)[: n // 5]
    masked_acc = evaluate_accuracy(model, ds.x[test_idx], ds.labels[test_idx],
                                   SelectionPolicy.top_k(), TOP_K)

    convert_emoe2lora(model)
    for block, snap_block in zip(model.blocks, snapshot.blocks):
        reference = merge(snap_block.layer)
        assert np.array_equal(block.layer.k, reference.k)
        assert np.array_equal(block.layer.v, reference.v)
    dense_acc = evaluate_accuracy(model, ds.x[test_idx], ds.labels[test_idx])

    convert_lora2emoe(model, [b.layer.partition() for b in snapshot.blocks], k=TOP_K)
    for block, snap_block in zip(model.blocks, snapshot.blocks):
        for a, b in zip(block.layer.experts, snap_block.layer.experts):
            assert np.array_equal(a.k_sub, b.k_sub)
            assert np.array_equal(a.v_sub, b.v_sub)
            assert np.array_equal(a.neuron_indices, b.neuron_indices)
        assert np.array_equal(block.layer.gate, snap_block.layer.gate)

    report("emoe2lora-workflow", start, 300.0,
           f"masked-eval {masked_acc:.3f} dense-eval {dense_acc:.3f} "
           f"gap {dense_acc - masked_acc:+.3f}")


def test_flops_accounting_cli(capsys):
    start = time.time()
    assert cli_run(["flops", "--h", "16", "--d", "64", "--experts", "8",
                    "--topk", "2"]) == 0
    out = capsys.readouterr().out
    assert "ratio: 0.3125" in out

    assert cli_run(["flops", "--h", "16", "--d", "64", "--experts", "8",
                    "--topk", "8"]) == 0
    out = capsys.readouterr().out
    ratio = float(next(l for l in out.split("\n") if l.startswith("ratio:")).split(":")[1])
    assert ratio == 1 + 8 / (2 * 64)
    with capsys.disabled():
        report("flops-accounting", start, 1.0)


def test_random_vs_cluster_construction():
    start = time.time()
    cluster_accs, random_accs = [], []
    for seed in SEEDS:
        ds, base = pretrained_base(seed)
        parts = cluster_partitions(base, N_EXPERTS, seed=seed + 4000)
        rparts = [random_partition(MODEL["d"], N_EXPERTS, seed=seed + 5000)]
        _, clog = masked_branch(base, ds, parts, SelectionPolicy.top_k(), seed)
        _, rlog = masked_branch(base, ds, rparts, SelectionPolicy.top_k(), seed)
        cluster_accs.append(clog.test_accuracy)
        random_accs.append(rlog.test_accuracy)
    c_med, r_med = float(np.median(cluster_accs)), float(np.median(random_accs))
    assert c_med >= r_med, (cluster_accs, random_accs)
    report("random-vs-cluster", start, 600.0,
           f"median cluster {c_med:.3f} random {r_med:.3f}")
