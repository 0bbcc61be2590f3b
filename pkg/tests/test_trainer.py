import json

import numpy as np
import pytest

from highlightrec.checkpoint import Checkpoint
from highlightrec.errors import DataError, InvalidInputError, NumericalError
from highlightrec.evaluation import evaluate_checkpoint
from highlightrec.trainer import TrainConfig, Trainer, rng_stream, train, validate

from helpers import synth_testbed

SMALL = dict(num_users=30, num_videos=20, segments_per_video=4, feature_dim=6)


@pytest.fixture(scope="module")
def bed():
    return synth_testbed(0, **SMALL)


def config(**kw):
    base = dict(dim=8, max_epochs=3, batch_size=20, negatives_per_positive=3, seed=1)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_variant_depth_defaults(self):
        assert TrainConfig().depth == 2
        assert TrainConfig(variant="A").depth == 1
        assert TrainConfig(variant="A", depth=0).depth == 0

    @pytest.mark.parametrize("kw", [dict(variant="B"), dict(dim=0), dict(learning_rate=0.0), dict(lambda_reg=-1.0),
                                    dict(pooling="sum"), dict(transfer_input="both"), dict(depth=-1)])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(InvalidInputError):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(InvalidInputError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    def test_dict_round_trip(self):
        cfg = TrainConfig(variant="A", dim=16, detach_target=False)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_json_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"dim": 12, "pooling": "max"}))
        cfg = TrainConfig.from_file(tmp_path / "c.json")
        assert (cfg.dim, cfg.pooling) == (12, "max")

    def test_from_key_value_file(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# comment\ndim = 12\nlambda_reg=0.5\ndetach_target=false\ndepth=none\n")
        cfg = TrainConfig.from_file(tmp_path / "c.cfg")
        assert (cfg.dim, cfg.lambda_reg, cfg.detach_target, cfg.depth) == (12, 0.5, False, 2)

    def test_bad_file_lines(self, tmp_path):
        (tmp_path / "a.cfg").write_text("dim=12\njunk\n")
        with pytest.raises(DataError, match=":2:"):
            TrainConfig.from_file(tmp_path / "a.cfg")
        (tmp_path / "b.cfg").write_text("dim=twelve\n")
        with pytest.raises(DataError, match="twelve"):
            TrainConfig.from_file(tmp_path / "b.cfg")
        (tmp_path / "c.json").write_text("[1, 2]")
        with pytest.raises(DataError):
            TrainConfig.from_file(tmp_path / "c.json")


def test_named_streams_are_independent_and_stable():
    a = rng_stream(3, "init").random(4)
    np.testing.assert_array_equal(a, rng_stream(3, "init").random(4))
    assert not np.array_equal(a, rng_stream(3, "sampling").random(4))
    assert not np.array_equal(a, rng_stream(4, "init").random(4))


def test_zero_epochs_returns_initialization(bed):
    trainer = Trainer(bed.graph, bed.data.features, bed.split, config(max_epochs=0))
    init = trainer.checkpoint()
    ckpt, report = trainer.run()
    assert report.epochs == [] and ckpt.to_bytes() == init.to_bytes()


def test_training_graph_excludes_test_edges(bed):
    trainer = Trainer(bed.graph, bed.data.features, bed.split, config())
    held = {bed.graph.segments[i].key for rec in bed.split.test_records for i in rec.positives}
    assert held and not held & set(trainer.graph.segment_keys)


@pytest.mark.parametrize("variant", ["E", "A"])
def test_same_seed_same_bytes(bed, variant):
    c1, r1 = train(bed.graph, bed.data.features, bed.split, config(variant=variant))
    c2, r2 = train(bed.graph, bed.data.features, bed.split, config(variant=variant))
    assert c1.to_bytes() == c2.to_bytes()
    assert r1 == r2 and r1.to_jsonl() == r2.to_jsonl()
    c3, _ = train(bed.graph, bed.data.features, bed.split, config(variant=variant, seed=2))
    assert c3.to_bytes() != c1.to_bytes()


def test_report_fields(bed):
    _, report = train(bed.graph, bed.data.features, bed.split, config(variant="A", patience=10))
    assert [e.epoch for e in report.epochs] == [1, 2, 3]
    for e in report.epochs:
        assert np.isfinite(e.bpr_loss) and e.disc_loss is not None and 0.0 <= e.disc_accuracy <= 1.0
    assert 1 <= report.best_epoch <= 3
    assert report.summary()["epochs_run"] == 3


def test_zero_transfer_weight_matches_pure_bpr(bed):
    """With lambda_transfer = 0 and a detached target the graph encoder follows
    exactly the trajectory of a run without any transfer term."""
    def trajectory(use_transfer):
        snaps = []
        t = Trainer(bed.graph, bed.data.features, bed.split, config(lambda_transfer=0.0), use_transfer=use_transfer)
        t.run(lambda epoch, tr: snaps.append({k: v.copy() for k, v in tr.gnn.items()}))
        return snaps

    for a, b in zip(trajectory(True), trajectory(False)):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


def test_best_checkpoint_validates_to_reported_score(bed, tmp_path):
    ckpt, report = train(bed.graph, bed.data.features, bed.split, config(max_epochs=4, patience=10))
    assert validate(ckpt, bed.graph, bed.split, bed.data.features) == report.best_val_ndcg5
    ckpt.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt")
    assert evaluate_checkpoint(back, bed.graph, bed.split, bed.data.features)[0] == \
        evaluate_checkpoint(ckpt, bed.graph, bed.split, bed.data.features)[0]


def test_early_stopping(bed):
    _, report = train(bed.graph, bed.data.features, bed.split, config(max_epochs=40, patience=1))
    assert report.stopped_early
    assert len(report.epochs) == report.best_epoch + 1


def test_numerical_error_carries_last_good(bed):
    trainer = Trainer(bed.graph, bed.data.features, bed.split, config(max_epochs=3))

    def poison(epoch, tr):
        if epoch == 1:
            tr.gnn["X"][0, 0] = np.nan

    with pytest.raises(NumericalError) as info:
        trainer.run(poison)
    assert isinstance(info.value.last_good, Checkpoint)
    assert np.all(np.isfinite(info.value.last_good.tensors["X"]))


def test_float32_training(bed):
    ckpt, report = train(bed.graph, bed.data.features, bed.split, config(dtype="float32"))
    assert ckpt.tensors["X"].dtype == np.float32
    assert all(np.isfinite(e.bpr_loss) for e in report.epochs)


@pytest.mark.slow
def test_training_loss_trends_down():
    bed = synth_testbed(0)
    _, report = train(bed.graph, bed.data.features, bed.split,
                      TrainConfig(dim=32, max_epochs=50, patience=50, seed=0))
    losses = np.array([e.bpr_loss for e in report.epochs])
    assert losses[40:50].mean() < losses[:10].mean()
