import itertools
import logging
import math

import numpy as np
import pytest

from navmatch import modelfile
from navmatch.euler import CLS, PAD, serialize
from navmatch.graph import LabeledGraph, geometric_graph
from navmatch.model import ModelConfig, NavigatorModel
from navmatch.trainer import (
    LOG_HEADER,
    Adam,
    EvaluationError,
    Trainer,
    TrainingConfig,
    TrainingDiverged,
    evaluate,
    generate_epoch_samples,
    holdout_mask,
    mask_tokens,
    mng_loss,
    ranking_metrics,
    train,
)


@pytest.fixture(scope="module")
def small_graph():
    return geometric_graph(60, 3, 4.0, seed=11)


def desk(vocab, n_labels, seed=0):
    return NavigatorModel.initialize(ModelConfig.from_profile("desk", vocab, n_labels), seed=seed)


# -- samples


def test_isolated_vertex_sample():
    g = LabeledGraph([0, 1, 1], [(1, 2)])
    samples = list(generate_epoch_samples(g, TrainingConfig(), np.random.default_rng(0)))
    assert len(samples) == 3
    s = samples[0]
    assert s.tokens.tolist() == [CLS] and s.target == 0 and s.query.vertex_count == 1


def test_tailed_triangle_masking():
    # a, b, c, d, e = 0..4 with path a c b d c d e
    nodes = serialize(LabeledGraph([0] * 5, [(0, 2), (1, 2), (1, 3), (2, 3), (3, 4)])).nodes
    origin = [10, 11, 12, 13, 14]
    tokens = mask_tokens(nodes, origin, masked=[1, 2], target_u=2)
    assert tokens.tolist() == [10, CLS, PAD, 13, CLS, 13, 14]


def test_samples_reconstruct_subgraph(small_graph):
    cfg = TrainingConfig(walk_min=2, walk_max=9)
    rng = np.random.default_rng(1)
    for s in generate_epoch_samples(small_graph, cfg, rng):
        assert s.origin[s.target_query_vertex] == s.target
        assert (s.tokens == CLS).sum() >= 1
        filled = np.where(s.tokens == CLS, s.target, s.tokens)
        want = [s.origin[u] for u in s.nodes]
        for got, w in zip(filled.tolist(), want):
            assert got == PAD or got == w
        # one token per query vertex across all of its occurrences
        for u in set(s.nodes):
            assert len({int(t) for t, x in zip(s.tokens, s.nodes) if x == u}) == 1
        masked = {u for u, t in zip(s.nodes, s.tokens) if t < 0}
        assert 1 <= len(masked) <= max(1, math.ceil(cfg.mask_ratio * s.query.vertex_count))
        assert 1 <= s.query.vertex_count <= 9
        assert s.positions.max() < 64


def test_sample_stream_deterministic(small_graph):
    cfg = TrainingConfig()
    a = list(generate_epoch_samples(small_graph, cfg, np.random.default_rng(4)))
    b = list(generate_epoch_samples(small_graph, cfg, np.random.default_rng(4)))
    assert all(np.array_equal(x.tokens, y.tokens) and x.target == y.target for x, y in zip(a, b))


def test_empty_graph_rejected():
    with pytest.raises(ValueError):
        list(generate_epoch_samples(LabeledGraph([]), TrainingConfig(), np.random.default_rng(0)))


def test_holdout_split():
    mask = holdout_mask(2000, 3, 0.1)
    assert 0.08 < mask.mean() < 0.12
    assert np.array_equal(mask, holdout_mask(2000, 3, 0.1))
    assert not holdout_mask(50, 3, 0.0).any()


# -- loss and metrics


def test_loss_values(caplog):
    assert mng_loss(np.full(4, 0.25), 2) == pytest.approx(math.log(4))
    assert mng_loss(np.array([0.0, 1.0]), 1) == 0.0
    with caplog.at_level(logging.WARNING):
        assert mng_loss(np.array([1.0, 0.0]), 1) == pytest.approx(-math.log(1e-12))
    assert "clamped" in caplog.text
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(7))
    for t in range(7):
        assert abs(mng_loss(P, t) + math.log(P[t])) < 1e-9
    assert all(mng_loss([1 - p, p], 1) >= mng_loss([1 - p - 0.01, p + 0.01], 1) for p in np.linspace(0.01, 0.9, 20))


def test_ranking_metrics_oracle_and_ties():
    P = np.eye(5)[[3, 1, 4]]
    assert ranking_metrics(P, [3, 1, 4]) == {"top1": 1.0, "mrr": 1.0}
    flat = np.full((2, 4), 0.25)
    m = ranking_metrics(flat, [0, 2])
    assert m["top1"] == 0.5 and m["mrr"] == pytest.approx((1 + 1 / 3) / 2)
    with pytest.raises(EvaluationError):
        ranking_metrics(np.zeros((0, 4)), [])


def test_uniform_mrr_expectation():
    V = 50
    rng = np.random.default_rng(0)
    targets = rng.integers(V, size=10_000)
    got = ranking_metrics(np.full((len(targets), V), 1 / V), targets)["mrr"]
    recip = 1 / np.arange(1, V + 1)
    mean, sd = recip.mean(), recip.std() / math.sqrt(len(targets))
    assert abs(got - mean) <= 3 * sd


def test_evaluate_empty():
    with pytest.raises(EvaluationError):
        evaluate(desk(10, 2), [])


# -- optimisation


def test_config_validation():
    for bad in (dict(epochs=0), dict(lr_decay=0), dict(lr_decay=1.5), dict(walk_min=6, walk_max=5),
                dict(mask_ratio=0), dict(mask_ratio=1.2), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainingConfig(**bad).validate()


def test_lr_schedule():
    cfg = TrainingConfig(learning_rate=5e-4, lr_decay=0.999)
    assert [cfg.lr_at(e) for e in range(4)] == [5e-4 * 0.999**e for e in range(4)]


def test_adam_matches_scalar_formula():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p)
    gs = [np.array([0.5, 0.1]), np.array([-0.3, 0.2])]
    m = v = np.zeros(2)
    ref = np.array([1.0, -2.0])
    for t, g in enumerate(gs, 1):
        opt.step(p, {"w": g}, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p["w"], ref, rtol=1e-12)


def test_zero_lr_leaves_params(small_graph):
    model = desk(60, 3)
    before = {k: v.copy() for k, v in model.params.items()}
    cfg = TrainingConfig(epochs=1, batch_size=16, learning_rate=0.0)
    samples = list(generate_epoch_samples(small_graph, cfg, np.random.default_rng(0)))
    Trainer(model, cfg).run_epoch(samples, 0)
    assert all(before[k].tobytes() == v.tobytes() for k, v in model.params.items())


def test_frozen_extractor(small_graph):
    model = desk(60, 3)
    before = {k: v.copy() for k, v in model.params.items()}
    cfg = TrainingConfig(epochs=1, batch_size=16, learning_rate=1e-3, freeze_extractor=True)
    samples = list(generate_epoch_samples(small_graph, cfg, np.random.default_rng(0)))
    Trainer(model, cfg).run_epoch(samples, 0)
    for k, v in model.params.items():
        assert np.array_equal(before[k], v) == k.startswith("qs.")


def test_overfit_fixed_samples():
    g = geometric_graph(500, 8, 6.0, seed=7)
    cfg = TrainingConfig(epochs=300, batch_size=16, learning_rate=1e-3, lr_decay=1.0)
    samples = list(itertools.islice(generate_epoch_samples(g, cfg, np.random.default_rng(0)), 32))
    trainer = Trainer(desk(500, 8), cfg)
    rng = np.random.default_rng(1)
    losses = [trainer.run_epoch(samples, e, rng) for e in range(300)]
    assert losses[-1] <= 0.1 * losses[0]


def test_divergence_names_batch(small_graph):
    model = desk(60, 3)
    model.params["nav.head.bias"][0] = np.nan
    cfg = TrainingConfig(epochs=1, batch_size=16)
    samples = list(generate_epoch_samples(small_graph, cfg, np.random.default_rng(0)))
    with pytest.raises(TrainingDiverged, match="batch 0"):
        Trainer(model, cfg).run_epoch(samples, 0)


def test_train_deterministic_with_log_and_checkpoints(small_graph, tmp_path):
    cfg = TrainingConfig(epochs=2, batch_size=16, learning_rate=1e-3, seed=5, checkpoint_every=1)
    mcfg = ModelConfig.from_profile("desk", 60, 3)
    a, rows = train(small_graph, cfg, mcfg, log_path=tmp_path / "a.csv", checkpoint_dir=tmp_path / "ca")
    b, _ = train(small_graph, cfg, mcfg, log_path=tmp_path / "b.csv", checkpoint_dir=tmp_path / "cb")
    assert modelfile.model_bytes(a) == modelfile.model_bytes(b)
    for name in ("checkpoint_00001.bin", "checkpoint_00002.bin"):
        assert (tmp_path / "ca" / name).read_bytes() == (tmp_path / "cb" / name).read_bytes()
    hp, tensors = modelfile.read_file(tmp_path / "ca" / "checkpoint_00002.bin")
    assert hp["epoch"] == 2 and hp["adam_step"] > 0
    assert "adam.m.nav.head.weight" in tensors and "adam.v.qs.label_embed" in tensors
    assert modelfile.model_bytes(modelfile.model_from_parts(hp, tensors)) == modelfile.model_bytes(a)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == LOG_HEADER and len(lines) == 3
    assert [r["epoch"] for r in rows] == [1, 2]
    strip = lambda text: [line.rsplit(",", 1)[0] for line in text.splitlines()]
    assert strip((tmp_path / "a.csv").read_text()) == strip((tmp_path / "b.csv").read_text())
