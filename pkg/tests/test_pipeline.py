import numpy as np
import pytest

from mvp.episodes import SamplerSpec
from mvp.pipeline import (EvalReport, GradientExplosionError, RunConfig, derive_seed, evaluate,
                          meta_finetune, meta_train)
from mvp.prompts import init_prompts
from mvp.vit import ViTConfig, init_backbone

FAST_VIT = ViTConfig(16, 16, 8, 8, 16, 1, 2)


def _cfg(**kw):
    base = dict(vit=FAST_VIT, prompt_tokens=2, episodes=5, finetune_steps=2,
                lr_grid=(0.1, 0.0), alpha_grid=(0.1, 0.25), eval_tasks=2,
                sampler=SamplerSpec(5, 2, 3))
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def setup():
    cfg = _cfg()
    return cfg, init_backbone(cfg.vit, 0), init_prompts(cfg.vit, cfg.prompt_tokens, 0)


class TestRunConfig:
    def test_digest_stable_and_sensitive(self):
        assert _cfg().digest() == _cfg().digest()
        assert _cfg().digest() != _cfg(seed=1).digest()

    @pytest.mark.parametrize("kw", [dict(lr_grid=()), dict(alpha_grid=(1.5,)), dict(finetune_steps=-1),
                                    dict(precision="float16"), dict(prompt_tokens=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            _cfg(**kw)

    def test_derive_seed(self):
        assert derive_seed(0, 1) == derive_seed(0, 1)
        assert derive_seed(0, 1) != derive_seed(0, 2)


class TestMetaTrain:
    def test_zero_episodes_identity(self, setup, synth_source):
        cfg, w, bank = setup
        out, trace = meta_train([synth_source], _cfg(episodes=0), bank, w)
        assert out.equals(bank) and trace == []

    def test_backbone_untouched_and_prompts_move(self, setup, synth_source):
        cfg, w, bank = setup
        before = w.digest()
        out, trace = meta_train([synth_source], _cfg(meta_lr=0.1), bank, w)
        assert w.digest() == before
        assert not out.equals(bank)
        assert len(trace) == 5 and all(np.isfinite(r.loss) for r in trace)

    def test_deterministic(self, setup, synth_source):
        cfg, w, bank = setup
        a, ta = meta_train([synth_source], cfg, bank, w)
        b, tb = meta_train([synth_source], cfg, bank, w)
        assert a.equals(b) and [r.loss for r in ta] == [r.loss for r in tb]

    def test_nan_prompts_abort(self, setup, synth_source):
        cfg, w, bank = setup
        bad = bank.with_prompts([np.full_like(a, np.nan) for a in bank.prompts])
        with pytest.raises(GradientExplosionError, match="episode 0"):
            meta_train([synth_source], cfg, bad, w)

    def test_target_overlap_rejected(self, setup, synth_source):
        cfg, w, bank = setup
        with pytest.raises(ValueError, match="overlap"):
            meta_train([synth_source], cfg, bank, w, exclude_ids=[synth_source.dataset_id])


class TestFinetune:
    def _support(self, data):
        ids = np.concatenate([np.flatnonzero(data.labels == c)[:2] for c in range(5)])
        return data.images[ids], np.repeat(np.arange(5), 2), ids

    def test_lr_zero_only_is_identity(self, setup, synth_target):
        _, w, bank = setup
        imgs, labs, ids = self._support(synth_target)
        res = meta_finetune(imgs, labs, bank, w, _cfg(lr_grid=(0.0,), alpha_grid=(0.05,)), 0, ids)
        assert res.bank.equals(bank)
        assert (res.lr, res.alpha) == (0.0, 0.05)

    def test_choice_in_grid_and_deterministic(self, setup, synth_target):
        cfg, w, bank = setup
        imgs, labs, ids = self._support(synth_target)
        a = meta_finetune(imgs, labs, bank, w, cfg, 11, ids)
        b = meta_finetune(imgs, labs, bank, w, cfg, 11, ids)
        assert a.lr in cfg.lr_grid and a.alpha in cfg.alpha_grid
        assert set(a.scores) == {(lr, al) for lr in cfg.lr_grid for al in cfg.alpha_grid}
        assert (a.lr, a.alpha) == (b.lr, b.alpha) and a.bank.equals(b.bank)

    def test_ties_prefer_smaller(self, setup, synth_target):
        cfg, w, bank = setup
        imgs, labs, ids = self._support(synth_target)
        res = meta_finetune(imgs, labs, bank, w, cfg, 0, ids)
        best = max(res.scores.values())
        assert (res.lr, res.alpha) == min(k for k, v in res.scores.items() if v == best)

    def test_empty_support(self, setup):
        cfg, w, bank = setup
        with pytest.raises(ValueError):
            meta_finetune(np.zeros((0, 3, 16, 16), np.uint8), np.zeros(0, int), bank, w, cfg, 0)


class TestEvalReport:
    def test_constant(self):
        r = EvalReport.from_accuracies([0.8] * 5)
        assert r.mean == pytest.approx(0.8) and r.half_width == pytest.approx(0.0, abs=1e-12)

    def test_two_tasks(self):
        r = EvalReport.from_accuracies([0.6, 1.0])
        assert r.mean == pytest.approx(0.8)
        assert r.half_width == pytest.approx(1.96 * 0.2828427 / np.sqrt(2), rel=1e-6)
        assert round(r.half_width, 3) == 0.392

    def test_single_task(self):
        assert EvalReport.from_accuracies([0.7]).half_width == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            EvalReport.from_accuracies([])


class TestEvaluate:
    def test_deterministic_report(self, setup, synth_target):
        cfg, w, bank = setup
        a = evaluate(synth_target, bank, w, cfg)
        b = evaluate(synth_target, bank, w, cfg)
        assert a == b
        assert a.n == 2 and 0 <= a.mean <= 1 and a.half_width >= 0
        assert a.seed == cfg.seed and a.config_digest == cfg.digest()

    def test_without_finetune(self, setup, synth_target):
        cfg, w, bank = setup
        r = evaluate(synth_target, bank, w, cfg, n_tasks=3, finetune=False)
        assert r.n == 3 and all(np.isnan(t.lr) for t in r.tasks)

    def test_needs_tasks(self, setup, synth_target):
        cfg, w, bank = setup
        with pytest.raises(ValueError):
            evaluate(synth_target, bank, w, cfg, n_tasks=0)
