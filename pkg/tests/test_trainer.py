"""
tests/test_trainer.py — training loop, audits, checkpoints, resume and transfer freezing.

Run with: pytest tests/test_trainer.py -v
"""
import numpy as np
import pytest

from app.config import TrainConfig
from app.core.tensor import constant
from app.lfb.functions import default_pool, heuristic_lf
from app.services.adp import NonFiniteError
from app.services.synthetic import gen_shapes
from app.services.trainer import (
    LOG_COLUMNS,
    AdpTrainer,
    LabelAuditError,
    LabelSpaceError,
    finetune_transfer,
    load_model,
    moving_average,
    train,
)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _tiny_cfg(**overrides):
    base = dict(iterations=3, d_steps=1, batch_size=8, latent_dim=4, trunk_widths=(8,),
                head_widths=(8,), disc_widths=(8,), label_widths=(4,), common_widths=(8,),
                lfb_widths=(4,), log_every=0, audit_every=1, checkpoint_every=0, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def _world(seed=0, style="A"):
    return gen_shapes(seed=seed, count=120, m=3, style=style)


def _lfs(n=3):
    return default_pool(3, (8, 8), n)


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

class TestTrainingLoop:
    def test_short_run_logs_every_iteration(self):
        result = train(_tiny_cfg(), _world(), _lfs())
        assert result.iterations == 3
        assert len(result.log) == 3
        assert set(LOG_COLUMNS) <= set(result.log[0])
        assert result.audits == 3
        assert all(np.isfinite(v) for row in result.log for v in row.values())
        np.testing.assert_array_equal(result.column("iteration"), [1.0, 2.0, 3.0])

    def test_same_seed_is_reproducible(self):
        a = train(_tiny_cfg(), _world(), _lfs())
        b = train(_tiny_cfg(), _world(), _lfs())
        assert a.model.checksum() == b.model.checksum()
        assert a.log == b.log

    def test_training_moves_every_group(self):
        trainer = AdpTrainer(_tiny_cfg(iterations=2), _world(), _lfs())
        before = {g: trainer.model.checksum(g) for g in ("g_common", "g_image", "g_parameter", "d", "d_lfb")}
        trainer.run()
        assert all(trainer.model.checksum(g) != c for g, c in before.items())

    def test_one_generator_step_moves_only_the_generator(self):
        trainer = AdpTrainer(_tiny_cfg(), _world(), _lfs())
        before = {g: trainer.model.checksum(g) for g in ("g_common", "g_image", "g_parameter", "d", "d_lfb")}
        trainer.generator_step()
        after = {g: trainer.model.checksum(g) for g in before}
        assert all(after[g] != before[g] for g in ("g_common", "g_image", "g_parameter"))
        assert after["d"] == before["d"] and after["d_lfb"] == before["d_lfb"]

    def test_zero_iterations(self):
        result = train(_tiny_cfg(iterations=0), _world(), _lfs())
        assert result.iterations == 0 and result.log == []

    def test_theta_label_rule_runs(self):
        result = train(_tiny_cfg(iterations=2, label_rule="theta"), _world(), _lfs())
        assert result.audits == 2


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class TestErrors:
    def test_audit_catches_a_corrupted_label_channel(self):
        trainer = AdpTrainer(_tiny_cfg(), _world(), _lfs())
        fake = trainer.make_fake(None, 4)
        trainer.audit(fake)
        fake.labels = constant(fake.labels.data + 0.1)
        with pytest.raises(LabelAuditError):
            trainer.audit(fake)

    def test_label_space_mismatch(self):
        lfs = [heuristic_lf("enclosure", 4, (8, 8))]
        with pytest.raises(LabelSpaceError):
            AdpTrainer(_tiny_cfg(), _world(), lfs)

    def test_arity_mismatch(self):
        lfs = [heuristic_lf("enclosure", 3, (6, 6))]
        with pytest.raises(ValueError):
            AdpTrainer(_tiny_cfg(), _world(), lfs)

    def test_no_lfs(self):
        with pytest.raises(ValueError):
            AdpTrainer(_tiny_cfg(), _world(), [])

    def test_non_finite_weights_abort_with_checkpoint(self, tmp_path):
        trainer = AdpTrainer(_tiny_cfg(), _world(), _lfs(), out_dir=tmp_path)
        trainer.model.group("g_image")[0].data[:] = np.nan
        with pytest.raises(NonFiniteError):
            trainer.run()
        assert (tmp_path / "checkpoints" / "abort" / "manifest.txt").exists()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class TestCheckpoints:
    def test_periodic_checkpoints_and_hooks(self, tmp_path):
        seen = []
        result = train(_tiny_cfg(iterations=4, checkpoint_every=2), _world(), _lfs(),
                       out_dir=tmp_path, hooks=[lambda t: seen.append(t.iteration)])
        assert [p.name for p in result.checkpoints] == ["iter000002", "iter000004"]
        assert seen == [2, 4]

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        full = train(_tiny_cfg(iterations=4, checkpoint_every=2), _world(), _lfs(), out_dir=tmp_path)
        resumed = train(_tiny_cfg(iterations=4), _world(), _lfs(),
                        resume_from=tmp_path / "checkpoints" / "iter000002")
        assert resumed.iterations == 4
        assert resumed.model.checksum() == full.model.checksum()
        assert resumed.log == full.log

    def test_load_model_restores_weights(self, tmp_path):
        cfg = _tiny_cfg(iterations=2, checkpoint_every=2)
        result = train(cfg, _world(), _lfs(), out_dir=tmp_path)
        model = load_model(cfg, tmp_path / "checkpoints" / "iter000002", 3, 3, 8, 8)
        assert model.checksum() == result.model.checksum()


# ---------------------------------------------------------------------------
# Transfer
# ---------------------------------------------------------------------------

class TestTransfer:
    def test_frozen_groups_stay_bit_identical(self):
        source = train(_tiny_cfg(iterations=2), _world(), _lfs())
        frozen = {g: source.model.checksum(g) for g in ("g_common", "g_parameter", "d_lfb")}
        image_head = source.model.checksum("g_image")
        finetune_transfer(source.model, _world(seed=1, style="B"), _tiny_cfg(iterations=2), _lfs())
        assert {g: source.model.checksum(g) for g in frozen} == frozen
        assert source.model.checksum("g_image") != image_head

    def test_lf_count_must_match(self):
        source = train(_tiny_cfg(iterations=1), _world(), _lfs())
        with pytest.raises(LabelSpaceError):
            finetune_transfer(source.model, _world(style="B"), _tiny_cfg(), _lfs(n=4))

    def test_unknown_group(self):
        source = train(_tiny_cfg(iterations=1), _world(), _lfs())
        with pytest.raises(ValueError):
            finetune_transfer(source.model, _world(style="B"), _tiny_cfg(), _lfs(), freeze=("encoder",))


class TestMovingAverage:
    def test_window(self):
        np.testing.assert_allclose(moving_average([1, 2, 3, 4], window=2), [1.5, 2.5, 3.5])

    def test_short_and_empty(self):
        np.testing.assert_allclose(moving_average([2, 4], window=10), [3.0])
        assert moving_average([]).size == 0
