import numpy as np
import pytest

from rfnnest import data
from rfnnest import networks as nw
from rfnnest import training as tr
from rfnnest.checkpoint import load_checkpoint, save_checkpoint
from rfnnest.errors import ConfigError, CorpusError, NumericError

from conftest import TINY_ARCH


def cfg(**kw):
    base = dict(arch=dict(TINY_ARCH), image_size=32, batch_size=2, steps=3, lr=1e-3, log_every=0, seed=0)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def singles():
    return data.synthetic_images(4, 32, seed=0)


@pytest.fixture(scope="module")
def pairs():
    return data.synthetic_pairs(4, 32, seed=1)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(stage="three"), dict(image_size=40), dict(batch_size=0),
                                    dict(lr=-1.0), dict(precision="float16"), dict(optimizer="rmsprop")])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            cfg(**kw)

    def test_total_steps_from_epochs(self):
        c = cfg(steps=None, epochs=2, batch_size=3)
        assert c.total_steps(10) == 8

    def test_deterministic_means_sgd(self):
        assert cfg(deterministic=True).optimizer_mode == "sgd"


def test_smoothed_is_trailing_mean():
    v = np.arange(1.0, 7.0)
    assert np.allclose(tr.smoothed(v, 3), [1, 1.5, 2, 3, 4, 5])


def test_history_csv_header(singles):
    res = tr.train_stage1(cfg(steps=2), singles)
    lines = tr.history_csv(res.history).splitlines()
    assert lines[0] == "step,epoch,loss,pixel,ssim" and len(lines) == 3


class TestStage1:
    def test_zero_lr_is_flat(self, singles):
        c = cfg(lr=0.0, steps=4, batch_size=4)
        start = nw.init_weights(c.arch, c.seed, c.dtype)
        res = tr.train_stage1(c, singles)
        assert res.weights.digest() == start.digest()
        assert np.all(res.losses() == res.losses()[0])

    def test_loss_decreases(self, singles):
        res = tr.train_stage1(cfg(steps=30, lr=3e-3), singles)
        sm = tr.smoothed(res.losses())
        assert sm[-1] < sm[0]

    def test_deterministic_repeatable(self, singles):
        a = tr.train_stage1(cfg(), singles)
        b = tr.train_stage1(cfg(), singles)
        assert np.array_equal(a.losses(), b.losses()) and a.weights.digest() == b.weights.digest()

    def test_resume_bit_exact(self, singles, tmp_path):
        full = tr.train_stage1(cfg(steps=4, deterministic=True), singles)
        head = tr.train_stage1(cfg(steps=2, deterministic=True), singles)
        path = save_checkpoint(head.weights, tmp_path / "head.rfnn")
        tail = tr.train_stage1(cfg(steps=2, deterministic=True, init_checkpoint=str(path), start_step=2), singles)
        assert tail.history[0]["step"] == 2
        assert np.array_equal(tail.losses(), full.losses()[2:])

    def test_epoch_checkpoints(self, singles, tmp_path):
        res = tr.train_stage1(cfg(steps=4, checkpoint_dir=str(tmp_path)), singles)
        assert [p.name for p in res.checkpoints] == ["stage1_epoch0.rfnn", "stage1_epoch1.rfnn"]
        last = load_checkpoint(res.checkpoints[-1])
        assert last.digest() == res.weights.digest()

    def test_nan_aborts_with_step_and_lr(self):
        bad = data.Dataset.from_images([np.full((32, 32), np.nan)] * 2)
        with pytest.raises(NumericError, match=r"step 0.*lr=0.001"):
            tr.train_stage1(cfg(), bad)

    def test_empty_dataset_refused(self):
        with pytest.raises(CorpusError, match="empty"):
            tr.train_stage1(cfg(), data.Dataset.from_images([]))

    def test_needs_single_mode(self, pairs):
        with pytest.raises(ConfigError):
            tr.train_stage1(cfg(), pairs)


class TestStage2:
    def test_freezing_contract(self, pairs):
        frozen = nw.init_weights(nw.ArchitectureConfig(**TINY_ARCH), seed=3, dtype=np.float32)
        before = frozen.digest(("encoder", "decoder"))
        rfn_before = frozen.digest(("rfn1", "rfn2", "rfn3", "rfn4"))
        res = tr.train_stage2(cfg(steps=3), pairs, frozen)
        assert res.weights.digest(("encoder", "decoder")) == before
        assert res.weights.digest(("rfn1", "rfn2", "rfn3", "rfn4")) != rfn_before

    def test_missing_checkpoint_is_config_error(self, pairs, tmp_path):
        with pytest.raises(ConfigError):
            tr.train_stage2(cfg(), pairs)
        with pytest.raises(ConfigError, match="not found"):
            tr.train_stage2(cfg(init_checkpoint=str(tmp_path / "none.rfnn")), pairs)

    def test_from_checkpoint_file(self, pairs, tmp_path):
        w = nw.init_weights(nw.ArchitectureConfig(**TINY_ARCH), seed=3, dtype=np.float32)
        path = save_checkpoint(w, tmp_path / "s1.rfnn")
        res = tr.train_stage2(cfg(steps=2, init_checkpoint=str(path)), pairs)
        assert res.weights.digest(("encoder", "decoder")) == w.digest(("encoder", "decoder"))
        assert set(res.history[0]) == {"step", "epoch", "loss", "detail", "feature"}

    def test_needs_pairs(self, singles):
        with pytest.raises(ConfigError):
            tr.train_stage2(cfg(), singles, nw.init_weights(nw.ArchitectureConfig(**TINY_ARCH)))


class TestOneStage:
    def test_every_group_moves(self, pairs):
        c = cfg(steps=1)
        start = nw.init_weights(c.arch, c.seed, c.dtype)
        res = tr.train_one_stage(c, pairs)
        for g in nw.ModelWeights.GROUPS:
            assert res.weights.digest((g,)) != start.digest((g,)), g

    def test_repeatable(self, pairs):
        a = tr.train_one_stage(cfg(deterministic=True), pairs)
        b = tr.train_one_stage(cfg(deterministic=True), pairs)
        assert np.array_equal(a.losses(), b.losses())


def test_no_nonfinite_losses_on_fixture(pairs):
    res = tr.train_one_stage(cfg(steps=4), pairs)
    assert np.all(np.isfinite(res.losses()))
