import copy

import numpy as np
import pytest
import torch

from promptadapt import adapt as adapt_mod
from promptadapt.adapt import (
    LOG_COLUMNS,
    PromptCache,
    TrainConfig,
    adaptation_step,
    automated_masks,
    branch_losses,
    build_branches,
    ema_update,
    make_optimizer,
    run_adaptation,
)
from promptadapt.data import make_toy_domain
from promptadapt.errors import ConfigurationError
from promptadapt.lora import read_checkpoint_manifest
from promptadapt.losses import LossConfig
from promptadapt.model import build_toy_model, parameter_checksum


@pytest.fixture(scope="module")
def images():
    return make_toy_domain("corrupted", 8, seed=21)


def small_model():
    return build_toy_model(seed=0, feature_dim=16)


def test_config_validation():
    for bad in ({"batch_size": 0}, {"prompt_type": "scribble"}, {"teacher_mode": "mean"}, {"ema_momentum": 1.0},
                {"labeled_subset_size": 0}, {"learning_rate": 0}, {"strong_policy": "warp:1:0:1"}):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)
    assert TrainConfig().to_dict()["loss"]["lambda_focal"] == 20.0


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.weight_decay, cfg.rank) == (4, 1e-4, 1e-4, 4)
    opt = make_optimizer(build_branches(small_model(), cfg).shared, cfg)
    assert isinstance(opt, torch.optim.Adam)
    assert opt.defaults["lr"] == 1e-4 and opt.defaults["weight_decay"] == 1e-4


def test_ema_update_values():
    shared = torch.nn.Linear(1, 1, bias=False).double()
    ema = torch.nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        shared.weight.fill_(1.0)
        ema.weight.fill_(0.0)
    ema_update(shared, ema, 0.9)
    assert float(ema.weight.detach()) == pytest.approx(0.1, abs=1e-15)
    for k in range(2, 60):
        ema_update(shared, ema, 0.9)
        assert 1.0 - float(ema.weight.detach()) == pytest.approx(0.9**k, rel=1e-9)
    ema_update(shared, ema, 0.0)
    assert torch.equal(ema.weight, shared.weight)
    with pytest.raises(ValueError):
        ema_update(shared, ema, 1.0)


def test_all_losses_off_leaves_parameters_unchanged(images):
    cfg = TrainConfig(loss=LossConfig(use_selftrain=False, use_anchor=False, use_contrastive=False))
    br = build_branches(small_model(), cfg)
    before = parameter_checksum(br.shared)
    rec = adaptation_step(images[:4], br, cfg, np.random.default_rng(0), make_optimizer(br.shared, cfg))
    assert parameter_checksum(br.shared) == before
    assert rec.losses["total"] == 0.0


def test_one_step_usually_lowers_the_batch_loss(images):
    cfg = TrainConfig()
    model = small_model()
    lowered = 0
    for trial in range(100):
        br = build_branches(model, dataclass_replace(cfg, seed=trial))
        opt = make_optimizer(br.shared, cfg)
        cache = PromptCache(cfg, br.anchor)
        batch = [images[(trial + k) % len(images)] for k in range(4)]

        def batch_loss():
            rng = np.random.default_rng([trial, 99])
            with torch.no_grad():
                return sum(float(branch_losses(br, s.image, cache.get(s, 0), cfg, rng).total) for s in batch)

        before = batch_loss()
        adaptation_step(batch, br, cfg, np.random.default_rng([trial, 99]), opt, cache)
        lowered += batch_loss() < before
    assert lowered >= 80


def dataclass_replace(cfg, **kw):
    import dataclasses

    return dataclasses.replace(cfg, **kw)


def test_branches_share_one_prompt_set(images, monkeypatch):
    cfg = TrainConfig()
    br = build_branches(small_model(), cfg)
    seen = []
    for name in ("anchor", "shared"):
        module = getattr(br, name)
        original = module.forward

        def spy(image, prompts, _orig=original):
            seen.append(prompts)
            return _orig(image, prompts)

        monkeypatch.setattr(module, "forward", spy)
    cache = PromptCache(cfg, br.anchor)
    ps = cache.get(images[0], 0)
    branch_losses(br, images[0].image, ps, cfg, np.random.default_rng(0))
    assert len(seen) == 3 and all(p is ps.prompts for p in seen)


def test_teacher_and_student_agree_on_the_same_input(images):
    cfg = TrainConfig()
    br = build_branches(small_model(), cfg)
    opt = make_optimizer(br.shared, cfg)
    rng = np.random.default_rng(0)
    cache = PromptCache(cfg, br.anchor)
    for step in range(3):
        adaptation_step(images[step : step + 2], br, cfg, rng, opt, cache, step)
        ps = cache.get(images[0], 0)
        with torch.no_grad():
            t, _ = br.teacher(images[0].image, ps.prompts)
            s, _ = br.student(images[0].image, ps.prompts)
        assert torch.equal(t, s)


def test_ema_teacher_lags_the_student(images):
    cfg = TrainConfig(teacher_mode="ema", ema_momentum=0.5, learning_rate=1e-2)
    br = build_branches(small_model(), cfg)
    assert br.teacher is br.ema_teacher and br.student is br.shared
    opt = make_optimizer(br.shared, cfg)
    adaptation_step(images[:2], br, cfg, np.random.default_rng(0), opt)
    s = dict(br.shared.named_parameters())
    for name, p in br.ema_teacher.named_parameters():
        if s[name].requires_grad and name.endswith(".B"):
            assert torch.allclose(p, 0.5 * s[name].detach())


def test_point_prompts_refresh_each_epoch_boxes_do_not(images):
    for kind, same in (("point", False), ("box", True)):
        cache = PromptCache(TrainConfig(prompt_type=kind), None)
        a, b = cache.get(images[0], 0), cache.get(images[0], 1)
        assert (a.prompts == b.prompts) is same
        assert cache.get(images[0], 0).prompts == a.prompts


def test_automated_masks_are_filtered_and_deduplicated(source_like):
    image = make_toy_domain("clean", 1, seed=4)[0].image
    assert automated_masks(source_like, image, stability_thresh=1.01) == []
    masks = automated_masks(source_like, image, iou_thresh=0.0, stability_thresh=0.0)
    assert masks
    for i, a in enumerate(masks):
        assert a.any()
        for b in masks[i + 1 :]:
            inter, union = (a & b).sum(), (a | b).sum()
            assert inter / union <= 0.7
    cfg = TrainConfig(prompt_type="automated", epochs=1, auto_iou_thresh=0.0, auto_stability_thresh=0.0)
    res = run_adaptation(source_like, make_toy_domain("corrupted", 4, seed=4), cfg)
    assert len(res.log) == 1 and res.log[0].prompt_count > 0


@pytest.fixture(scope="module")
def source_like():
    from promptadapt.adapt import train_supervised

    m = small_model()
    train_supervised(m, make_toy_domain("clean", 40, seed=1), 150, lr=3e-3)
    return m


def test_subset_size_draws_that_many_distinct_images(monkeypatch):
    samples = make_toy_domain("corrupted", 60, seed=2)
    seen = {}
    original = PromptCache.get

    def spy(self, sample, epoch):
        seen.setdefault(epoch, []).append(sample.id)
        return original(self, sample, epoch)

    monkeypatch.setattr(PromptCache, "get", spy)
    monkeypatch.setattr(adapt_mod, "branch_losses", _cheap_losses)
    run_adaptation(small_model(), samples, TrainConfig(epochs=2, labeled_subset_size=50))
    for ids in seen.values():
        assert len(ids) == 50 and len(set(ids)) == 50


def _cheap_losses(branches, image, prompts, cfg, rng):
    from promptadapt.losses import total_loss

    z = torch.zeros(())
    return total_loss(z, z, z, z, cfg.loss)


def test_run_writes_log_and_checkpoints(tmp_path, images):
    cfg = TrainConfig(epochs=2, batch_size=3)
    res = run_adaptation(small_model(), images, cfg, held_out=images[:2], out_dir=tmp_path)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].split(",") == list(LOG_COLUMNS)
    assert len(lines) == 1 + 2 * 3
    assert len(res.epoch_miou) == 2 and res.best_model is not None
    assert read_checkpoint_manifest(tmp_path / "adapter.ckpt")["train_weak_sup"] == "box"
    assert (tmp_path / "adapter_best.ckpt").exists()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        run_adaptation(small_model(), [], TrainConfig())


def test_base_model_is_not_modified(images):
    model = small_model()
    before = parameter_checksum(model)
    run_adaptation(model, images[:4], TrainConfig(epochs=1, learning_rate=1e-2, finetune_mode="full+decoder"))
    assert parameter_checksum(model) == before


def test_branches_agree_at_step_zero(images):
    br = build_branches(small_model(), TrainConfig())
    assert br.teacher is br.student
    ps = PromptCache(TrainConfig(), br.anchor).get(images[0], 0)
    with torch.no_grad():
        a, fa = br.anchor(images[0].image, ps.prompts)
        s, fs = br.student(images[0].image, ps.prompts)
    assert torch.equal(a, s) and torch.equal(fa, fs)
