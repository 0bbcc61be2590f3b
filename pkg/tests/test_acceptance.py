"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Training runs use the synthetic testbed (200 users, 100 videos x 8 segments,
4 clusters, 32 feature dims, seeds 0..4) with embedding size 32 and otherwise
default hyperparameters.
"""

import functools
import itertools
import math
import time

import numpy as np
import pytest

from highlightrec.checkpoint import Checkpoint
from highlightrec.dataset import RatingGraph, Segment
from highlightrec.evaluation import (
    RankingRun,
    average_precision,
    embedding_distance_report,
    evaluate_checkpoint,
    ndcg_at,
    nmsd,
    topn_metrics,
    transfer_error,
)
from highlightrec.gnn import init_gnn_params, propagate
from highlightrec.transfer import adversarial_losses, transfer_forward
from highlightrec.trainer import TrainConfig, Trainer

from helpers import (
    KINK_MARGIN,
    brute_metrics,
    check_gradients,
    micro_instance,
    oracle_propagate,
    random_run,
    synth_testbed,
)

SEEDS = range(5)
DIM = 32
GRAD_TOL = 1e-4


@pytest.fixture
def criterion(request, capsys):
    """Collects a criterion's label and details; prints the verdict line."""
    info = {"detail": []}
    yield info
    rep = getattr(request.node, "call_report", None)
    status = "PASS" if rep is not None and rep.passed else "FAIL"
    detail = "; ".join(info["detail"])
    with capsys.disabled():
        print(f"\n[acceptance {info['id']}] {status}: {info['name']}" + (f" ({detail})" if detail else ""))


@functools.lru_cache(maxsize=None)
def bed_for(seed):
    return synth_testbed(seed)


@functools.lru_cache(maxsize=None)
def trained(seed, depth=2, variant="E", **overrides):
    """Train once per setting; returns (trainer, init checkpoint, best checkpoint, report, seconds)."""
    bed = bed_for(seed)
    cfg = TrainConfig(variant=variant, dim=DIM, depth=depth, seed=seed, **overrides)
    trainer = Trainer(bed.graph, bed.data.features, bed.split, cfg)
    init = trainer.checkpoint()
    t0 = time.perf_counter()
    best, report = trainer.run()
    return trainer, init, best, report, time.perf_counter() - t0


def ndcg5_of(seed, depth):
    bed = bed_for(seed)
    return evaluate_checkpoint(trained(seed, depth)[2], bed.graph, bed.split, bed.data.features)[0]["ndcg@5"]


def expected_random_ndcg(runs, n=5):
    """Exact mean NDCG@n of a uniformly random ordering: every rank holds a
    positive with probability g / len(candidates)."""
    vals = []
    for run in runs:
        total, g = len(run.candidates), len(run.positives)
        dcg = sum((g / total) / math.log2(r + 1) for r in range(1, min(n, total) + 1))
        idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(n, g) + 1))
        vals.append(dcg / idcg)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------


def test_1_gradient_suite(criterion):
    criterion.update(id=1, name="analytic gradients match central differences on full objectives")
    t0 = time.perf_counter()
    objectives = {
        "joint": lambda inst: (lambda p: inst.joint_loss(p, detach_target=False)),
        "generator": lambda inst: inst.generator_loss,
        "discriminator": lambda inst: inst.discriminator_loss,
    }
    accepted = {k: 0 for k in objectives}
    worst = {k: 0.0 for k in objectives}
    depths = {k: set() for k in objectives}
    seed = 0
    while min(accepted.values()) < 100 and seed < 1000:
        inst = micro_instance(seed)
        for name, make in objectives.items():
            if accepted[name] >= 100:
                continue
            result = check_gradients(make(inst), inst.params)
            if result.margin < KINK_MARGIN:
                continue
            accepted[name] += 1
            worst[name] = max(worst[name], result.worst)
            depths[name].add(inst.depth)
        seed += 1
    elapsed = time.perf_counter() - t0
    criterion["detail"] += [f"{k}: {accepted[k]} instances, worst rel err {worst[k]:.1e}" for k in objectives]
    criterion["detail"].append(f"{elapsed:.0f}s")
    assert all(v >= 100 for v in accepted.values())
    assert all(v <= GRAD_TOL for v in worst.values())
    assert all(d == {0, 1, 2} for d in depths.values())
    assert elapsed < 120


def small_graphs():
    """Every bipartite graph with at most four nodes and at least one node per side."""
    for m, n in [(1, 1), (1, 2), (2, 1), (1, 3), (3, 1), (2, 2)]:
        cells = [(a, i) for a in range(m) for i in range(n)]
        for mask in itertools.product([False, True], repeat=len(cells)):
            edges = [c for c, keep in zip(cells, mask) if keep]
            segs = [Segment(i, "v", 5.0 * i, 5.0 * (i + 1), i) for i in range(n)]
            yield RatingGraph([f"u{a}" for a in range(m)], segs, edges)


def test_2_propagation_oracle(criterion):
    criterion.update(id=2, name="propagation equals a per-node hand evaluation")
    rng = np.random.default_rng(0)
    cases, worst = 0, 0.0
    for graph in small_graphs():
        for depth, pooling in itertools.product((0, 1, 2), ("mean", "max")):
            p = init_gnn_params(graph.num_users, graph.num_segments, 3, 4, depth, rng, std=0.8).as_dict()
            feats = rng.standard_normal((3, graph.num_segments))
            state = propagate(graph, p, feats, pooling)
            us, vs = oracle_propagate(graph, p, feats, pooling)
            for layer in range(depth + 1):
                worst = max(worst, float(np.max(np.abs(state.U[layer].value - us[layer]))),
                            float(np.max(np.abs(state.V[layer].value - vs[layer]))))
            cases += 1
    criterion["detail"].append(f"{cases} cases, max abs diff {worst:.1e}")
    assert cases == 42 * 6
    assert worst <= 1e-12


def test_3_metric_oracle(criterion):
    criterion.update(id=3, name="ranking metrics equal brute-force versions")
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        run = random_run(rng)
        for n in (1, 3, 5):
            ap, ms, hr, rec, nd = brute_metrics(run, n)
            mismatches += (average_precision(run), nmsd(run), *topn_metrics(run, n)) != (ap, ms, hr, rec, nd)
        oracle = RankingRun.build(0, "v", run.candidates, [float(c in run.positives) for c in run.candidates],
                                  run.positives)
        g = len(run.positives)
        mismatches += (average_precision(oracle), nmsd(oracle), ndcg_at(oracle, g)) != (1.0, 0.0, 1.0)
    criterion["detail"].append(f"1000 rankings, {mismatches} mismatches")
    assert mismatches == 0


def test_4_inductive_cold_items(criterion):
    criterion.update(id=4, name="variant E beats random by 0.15 and the K=0 ablation on unseen videos")
    seconds = 0.0
    failures = []
    for seed in SEEDS:
        bed = bed_for(seed)
        trainer, _, best, _, sec = trained(seed, 2)
        seconds += sec + trained(seed, 0)[4]
        train_keys = set(trainer.graph.segment_keys)
        test_videos = {rec.video_id for rec in bed.split.test_records}
        leaked = [k for v in test_videos for k in (bed.graph.segments[i].key for i in bed.graph.video_segments[v])
                  if k in train_keys]
        metrics, runs = evaluate_checkpoint(best, bed.graph, bed.split, bed.data.features)
        rand = expected_random_ndcg(runs)
        ablation = ndcg5_of(seed, 0)
        e = metrics["ndcg@5"]
        criterion["detail"].append(f"seed {seed}: E {e:.3f} random {rand:.3f} K=0 {ablation:.3f}")
        if leaked or not test_videos or e < rand + 0.15 or e < ablation:
            failures.append(seed)
    criterion["detail"].append(f"training {seconds:.0f}s")
    assert not failures
    assert seconds < 600


def test_5_transfer_approximation(criterion):
    criterion.update(id=5, name="transfer error drops below 25% of its initial value; d(v_hat, v) < d(v0, v)")
    failures = []
    for seed in SEEDS:
        trainer, init, best, _, _ = trained(seed, 2)
        cfg = trainer.config.to_dict()
        e0 = transfer_error(init, trainer.graph, trainer.feats, cfg)
        e1 = transfer_error(best, trainer.graph, trainer.feats, cfg)
        dist = embedding_distance_report(best, trainer.graph, trainer.features)
        items = trainer.state(best.gnn_params).items.value
        scale = float(np.mean(np.sum(items ** 2, axis=0)))
        joint = trained(seed, 2, detach_target=False)
        j0 = transfer_error(joint[1], joint[0].graph, joint[0].feats, cfg)
        j1 = transfer_error(joint[2], joint[0].graph, joint[0].feats, cfg)
        criterion["detail"].append(
            f"seed {seed}: ratio {e1 / e0:.3f} (error/|v|^2 {e1 / scale:.3f}, joint-flow ratio {j1 / j0:.3f}), "
            f"d(v_hat,v) {dist['d_vhat_v']:.3f} d(v0,v) {dist['d_v0_v']:.3f}")
        if not (e1 < 0.25 * e0 and dist["d_vhat_v"] < dist["d_v0_v"]):
            failures.append(seed)
    assert not failures


def test_6_adversarial_sanity(criterion):
    criterion.update(id=6, name="variant A zero-sum identity; 50 finite epochs; disc accuracy in [0.5, 0.999] after epoch 10")
    bed = bed_for(0)
    trainer = Trainer(bed.graph, bed.data.features, bed.split, TrainConfig(variant="A", dim=DIM, seed=0))
    trip = trainer.sampler.triplets(trainer.graph.edges[:50])
    state = trainer.state()
    items = np.concatenate([trip[:, 1], trip[:, 2]])
    users = np.concatenate([trip[:, 0], trip[:, 0]])
    ratings = np.concatenate([np.ones(len(trip)), np.zeros(len(trip))])
    fake = transfer_forward(state.content.value[:, items], trainer.tnet).value
    adv = adversarial_losses(state.items.value[:, items], fake, state.users.value[:, users], ratings, trainer.disc)
    identity = adv.generator_loss.value == adv.fake_term.value and \
        adv.discriminator_fake_term.value == -adv.generator_loss.value
    criterion["detail"].append(f"zero-sum identity {'exact' if identity else 'broken'}")

    failures = []
    for seed in SEEDS:
        _, _, _, report, _ = trained(seed, 1, "A", max_epochs=50, patience=50)
        finite = all(np.isfinite([e.bpr_loss, e.transfer_loss, e.disc_loss]).all() for e in report.epochs)
        acc = [e.disc_accuracy for e in report.epochs if e.epoch > 10]
        outside = [e.epoch for e in report.epochs if e.epoch > 10 and not 0.5 <= e.disc_accuracy <= 0.999]
        criterion["detail"].append(f"seed {seed}: {len(report.epochs)} epochs, accuracy {min(acc):.3f}..{max(acc):.3f}"
                                   + (f", outside at epochs {outside}" if outside else ""))
        if len(report.epochs) != 50 or not finite or outside:
            failures.append(seed)
    assert identity
    assert not failures


def test_7_depth_ablation(criterion):
    criterion.update(id=7, name="median NDCG@5 over seeds: K=1 and K=2 each beat K=0")
    med = {k: float(np.median([ndcg5_of(s, k) for s in SEEDS])) for k in (0, 1, 2)}
    criterion["detail"].append(", ".join(f"K={k} {v:.3f}" for k, v in med.items()))
    assert med[1] > med[0] and med[2] > med[0]


def test_8_determinism(criterion, tmp_path):
    criterion.update(id=8, name="same seed and config give identical bytes; checkpoint round trip is exact")
    bed = bed_for(0)
    outputs = []
    for variant in ("E", "A", "E"):
        cfg = TrainConfig(variant=variant, dim=DIM, seed=0, max_epochs=4)
        ckpt, report = Trainer(bed.graph, bed.data.features, bed.split, cfg).run()
        outputs.append((ckpt.to_bytes(), report.to_jsonl()))
    again = []
    for variant in ("E", "A"):
        cfg = TrainConfig(variant=variant, dim=DIM, seed=0, max_epochs=4)
        ckpt, report = Trainer(bed.graph, bed.data.features, bed.split, cfg).run()
        again.append((ckpt.to_bytes(), report.to_jsonl()))
    same = outputs[0] == again[0] == outputs[2] and outputs[1] == again[1]

    ckpt = Checkpoint.from_bytes(outputs[0][0])
    ckpt.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt")
    m1, r1 = evaluate_checkpoint(ckpt, bed.graph, bed.split, bed.data.features)
    m2, r2 = evaluate_checkpoint(back, bed.graph, bed.split, bed.data.features)
    round_trip = m1 == m2 and [r.ranked() for r in r1] == [r.ranked() for r in r2] and \
        all(np.array_equal(a.scores, b.scores) for a, b in zip(r1, r2))
    criterion["detail"].append(f"bytes {'identical' if same else 'differ'}, round trip {'exact' if round_trip else 'differs'}")
    assert same and round_trip
