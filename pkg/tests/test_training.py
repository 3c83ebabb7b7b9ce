import csv

import numpy as np
import pytest
import torch

from pfagan.core import AgeGroupPartition
from pfagan.errors import ConfigError, NumericalError
from pfagan.losses import FeatureExtractor
from pfagan.networks import AgeEstimator, load_checkpoint, save_checkpoint
from pfagan.training import (AgePretrainConfig, PFATrainer, TrainConfig, predict_ages,
                             pretrain_age_estimator, train)

PART = AgeGroupPartition()
AGES = {1: 22, 2: 35, 3: 45, 4: 62}


def toy_faces(n_per_group=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    groups = np.repeat([1, 2, 3, 4], n_per_group)
    ages = np.array([AGES[k] for k in groups])
    images = torch.rand(len(groups), 3, 64, 64, generator=g) * 2 - 1
    return images, groups, ages


def tiny_cfg(**kw):
    base = dict(max_iterations=3, batch_size=4, base_channels=4, n_residual=1, disc_channels=8,
                checkpoint_every=2, keep_last=1, seed=0)
    return TrainConfig(**{**base, **kw})


def make_trainer(**kw):
    images, groups, ages = toy_faces()
    torch.manual_seed(123)
    estimator = AgeEstimator(4, 64, base_channels=8)
    return PFATrainer(tiny_cfg(**kw), PART, estimator, images, groups, ages, features=FeatureExtractor(layer=2))


def fixed_batch(trainer, sources, targets):
    # toy_faces lays groups out in blocks of four
    idx = [4 * (s - 1) for s in sources]
    tg = list(targets)
    return {"x_s": trainer.images[idx], "source": list(sources), "target": tg, "target_group": tg,
            "target_age": [AGES[t] for t in tg], "x_real": trainer.images[:len(idx)],
            "real_group": [1] * len(idx)}


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def changed(before, module, prefix=""):
    after = module.state_dict()
    return {k for k, v in before.items() if k.startswith(prefix) and not torch.equal(v, after[k])}


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(max_iterations=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_G=-1)
    with pytest.raises(ConfigError):
        TrainConfig(mode="cyclegan")


def test_classification_only_forces_lambda_age():
    assert TrainConfig().weights.lambda_age == 0.4
    assert TrainConfig(age_net="classification_only").weights.lambda_age == 8.0
    cfg = TrainConfig(age_net="classification_only", weights={"lambda_age": 2.0}, lambda_age_override=True)
    assert cfg.weights.lambda_age == 2.0


def test_train_step_is_deterministic():
    reports = []
    for _ in range(2):
        trainer = make_trainer()
        reports.append([trainer.train_step() for _ in range(2)])
    assert reports[0] == reports[1]
    assert all(np.isfinite(v) for r in reports[0] for v in r.values())


def test_age_estimator_stays_frozen():
    trainer = make_trainer()
    before = snapshot(trainer.age_estimator)
    for _ in range(2):
        trainer.train_step()
    assert not changed(before, trainer.age_estimator)


def test_gradient_reaches_first_subnet():
    trainer = make_trainer()
    before = snapshot(trainer.generator)
    trainer.train_step(fixed_batch(trainer, [1, 1], [4, 4]))
    for i, subnet in enumerate(trainer.generator.subnets):
        norm = sum(p.grad.norm() for p in subnet.parameters() if p.grad is not None)
        assert norm > 0, f"subnet {i + 1} received no gradient"
    assert changed(before, trainer.generator, "subnets.0.")


def test_zero_gates_leave_generator_untouched():
    trainer = make_trainer()
    before = snapshot(trainer.generator)
    trainer.train_step(fixed_batch(trainer, [3, 3], [3, 3]))
    assert not changed(before, trainer.generator)
    x = trainer.images[:2]
    assert torch.equal(trainer.generator(x, torch.zeros(3, dtype=torch.long)), x)


def test_independent_mode_updates_single_subnet():
    trainer = make_trainer(mode="pfa_independent")
    before = snapshot(trainer.generator)
    trainer.train_step(fixed_batch(trainer, [2, 2], [3, 3]))
    touched = changed(before, trainer.generator)
    assert touched and all(k.startswith("subnets.1.") for k in touched)


def test_independent_mode_samples_adjacent_pairs():
    trainer = make_trainer(mode="pfa_independent")
    batch = trainer.sample_batch()
    assert all(t == s + 1 for s, t in zip(batch["source"], batch["target"]))


def test_cgan_single_channels():
    trainer = make_trainer(mode="cgan_single")
    first = next(m for m in trainer.generator.modules() if isinstance(m, torch.nn.Conv2d))
    assert first.in_channels == 3 + 4
    d_first = next(m for m in trainer.discriminator.modules() if isinstance(m, torch.nn.Conv2d))
    assert d_first.in_channels == 3
    assert np.isfinite(trainer.train_step()["total"])


def test_rejuvenation_batches_point_younger():
    trainer = make_trainer(direction="rejuvenation")
    batch = trainer.sample_batch()
    natural = [5 - s for s in batch["source"]]
    assert all(tg < src for tg, src in zip(batch["target_group"], natural))
    assert np.isfinite(trainer.train_step(batch)["total"])


def test_nan_loss_aborts():
    trainer = make_trainer()
    batch = trainer.sample_batch()
    batch["x_real"] = torch.full_like(batch["x_real"], float("nan"))
    with pytest.raises(NumericalError, match="discriminator"):
        trainer.train_step(batch)


def test_train_writes_log_and_checkpoints(tmp_path):
    trainer = make_trainer(max_iterations=5)
    scores = iter([0.1, 0.5, 0.3])
    train(trainer, tmp_path, on_checkpoint=lambda _: next(scores))
    with (tmp_path / "losses.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["iteration"]) for r in rows] == [1, 2, 3, 4, 5]
    ckpts = sorted(p.name for p in (tmp_path / "checkpoints").glob("generator_*.pt"))
    assert ckpts == ["generator_0000005.pt", "generator_best.pt"]
    generator, meta = load_checkpoint(tmp_path / "checkpoints" / "generator_best.pt")
    assert meta["iteration"] == 4


def test_losses_log_is_reproducible(tmp_path):
    for name in ("a", "b"):
        train(make_trainer(max_iterations=3), tmp_path / name)
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()


def brightness_faces(n, seed):
    rng = np.random.default_rng(seed)
    ages = rng.integers(15, 76, n)
    level = (ages - 15) / 60.0 * 1.6 - 0.8
    images = level[:, None, None, None] + 0.05 * rng.standard_normal((n, 3, 64, 64))
    return torch.as_tensor(images, dtype=torch.float32), ages, np.array([PART.group_of(a) for a in ages])


@pytest.mark.slow
def test_pretrain_learns_brightness_age():
    x, ages, groups = brightness_faces(256, 0)
    vx, vages, _ = brightness_faces(64, 1)
    cfg = AgePretrainConfig(epochs=40, batch_size=32, lr=1e-3, base_channels=8)
    net, report = pretrain_age_estimator(x, ages, groups, cfg, 4, vx, vages)
    assert report["val_mae"] < 5.0
    assert not any(p.requires_grad for p in net.parameters())


@pytest.mark.slow
def test_pretrain_on_constant_images_has_no_signal():
    rng = np.random.default_rng(0)
    ages = rng.integers(15, 76, 128)
    groups = np.array([PART.group_of(a) for a in ages])
    x = torch.zeros(128, 3, 64, 64)
    cfg = AgePretrainConfig(epochs=40, batch_size=32, lr=1e-3, base_channels=8)
    net, report = pretrain_age_estimator(x, ages, groups, cfg, 4, x, ages)
    spread = np.mean(np.abs(ages - np.median(ages)))
    assert report["val_mae"] >= spread - 1e-6
    assert report["val_mae"] < 1.5 * np.mean(np.abs(ages - ages.mean()))


def test_estimator_checkpoint_roundtrip(tmp_path):
    x, ages, groups = brightness_faces(16, 0)
    net, _ = pretrain_age_estimator(x, ages, groups, AgePretrainConfig(epochs=1, batch_size=8, base_channels=8), 4)
    path = save_checkpoint(net, tmp_path / "age.pt", {"n_groups": 4, "image_size": 64, "base_channels": 8})
    loaded, _ = load_checkpoint(path)
    assert np.array_equal(predict_ages(net, x), predict_ages(loaded, x))


def test_pretrain_rejects_empty():
    with pytest.raises(ConfigError):
        pretrain_age_estimator(torch.zeros(0, 3, 64, 64), [], [], AgePretrainConfig(epochs=1))
