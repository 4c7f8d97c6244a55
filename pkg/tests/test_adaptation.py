import copy
import math
from collections.abc import Sequence
from dataclasses import replace

import numpy as np
import pytest
import torch

from adaptation import (
    AdaptConfig,
    FeatureCache,
    Segmenter,
    SourceTrainConfig,
    _poly_schedule,
    augment_features,
    finetune_classifier,
    load_checkpoint,
    perturb_own_stats,
    save_checkpoint,
    source_only_g_train,
    train_source,
)
from conftest import stack_images
from core_stats import NO_NOISE, channel_stats
from encoder_backends import ToyBackend, mean_image_embedding
from errors import ManifestMismatchError, ValidationError
from evaluation import evaluate_model
from main import _toy_run
from pipeline_io import SegSample, generate_toy_dataset, load_dataset
from run_config import RunConfig
from style_mining import INIT_MODES, StyleBank, mine_bank


def fresh_model(backend, seed=0, **kwargs):
    torch.manual_seed(seed)
    return Segmenter(backend, 4, head_width=16, **kwargs)


def state_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def bank_of(stats, backend):
    return StyleBank.from_stats(stats, encoder_id=backend.id)


class RecordingSamples(Sequence):
    def __init__(self, samples):
        self.samples = samples
        self.reads = []

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        self.reads.append(index)
        return self.samples[index]


@pytest.fixture(scope="module")
def trained(toy_backend, toy_train):
    model = fresh_model(toy_backend, trainable_stages=("layer2",))
    return train_source(model, toy_train, SourceTrainConfig.toy(iterations=40))


def test_low_stages_cannot_be_trained(toy_backend):
    with pytest.raises(ValidationError, match="must stay frozen"):
        Segmenter(toy_backend, 4, trainable_stages=("layer1",))
    with pytest.raises(ValidationError, match="unknown trunk stages"):
        Segmenter(toy_backend, 4, trainable_stages=("layer9",))
    with pytest.raises(ValidationError):
        Segmenter(toy_backend, 1)


def test_segmenter_logits_match_label_size(toy_backend, toy_train):
    model = fresh_model(toy_backend)
    logits = model(stack_images(toy_train[:2]))
    assert tuple(logits.shape) == (2, 4, 64, 64)
    assert tuple(model.predict(toy_train[0].image).shape) == (64, 64)


def test_split_two_segmenter_has_no_trainable_stages():
    backend = ToyBackend(layer_split=2)
    model = fresh_model(backend)
    assert tuple(model(torch.rand(1, 3, 64, 64)).shape) == (1, 4, 64, 64)


def test_source_training_lowers_the_loss_and_keeps_the_encoder_frozen(toy_backend, trained):
    history = trained.loss_history
    assert np.mean(history[-5:]) < np.mean(history[:5])
    assert trained.frozen_checksum() == ToyBackend(layer_split=1).checksum()
    assert trained.provenance["source_trained"] is True
    assert not torch.equal(trained.high_stages["layer2"][0].weight, toy_backend.stages["layer2"][0].weight)


def test_source_training_decodes_only_the_drawn_samples(toy_backend, toy_train):
    samples = RecordingSamples(toy_train)
    train_source(fresh_model(toy_backend), samples, SourceTrainConfig.toy(iterations=2, batch_size=3))
    assert len(samples.reads) == 6


def test_source_training_rejects_out_of_range_labels(toy_backend, toy_train):
    sample = toy_train[0]
    broken = SegSample(sample.image, torch.full_like(sample.label, 7), "broken")
    with pytest.raises(ValidationError, match="broken"):
        train_source(fresh_model(toy_backend), [broken], SourceTrainConfig.toy(iterations=1))


def test_all_ignore_batches_take_no_step(toy_backend, toy_train):
    sample = toy_train[0]
    ignored = SegSample(sample.image, torch.full_like(sample.label, 255), "ignored")
    model = fresh_model(toy_backend)
    before = copy.deepcopy(model.head.state_dict())
    train_source(model, [ignored], SourceTrainConfig.toy(iterations=3))
    assert model.loss_history == []
    assert all(torch.equal(before[k], v) for k, v in model.head.state_dict().items())


def test_identity_bank_leaves_features_unchanged(toy_backend, toy_train):
    f = toy_backend.extract_low_features(toy_train[0].image)
    bank = bank_of(channel_stats(f[None]), toy_backend)
    out = augment_features(f, bank, AdaptConfig(), torch.Generator().manual_seed(0))
    assert out.shape == f.shape
    assert (out - f).abs().max() <= 1e-5


def test_zero_mixing_weight_keeps_own_style(toy_backend, toy_train):
    f = toy_backend.extract_low_features(stack_images(toy_train[:3]))
    bank = bank_of(channel_stats(f.flip(0)), toy_backend)
    alpha = torch.zeros(3, 8, dtype=torch.float64)
    out = augment_features(f, bank, AdaptConfig(style_mix=True), torch.Generator().manual_seed(0), alpha=alpha)
    assert (out - f).abs().max() <= 1e-5


def test_augmentation_takes_banked_statistics(toy_backend, toy_train):
    f = toy_backend.extract_low_features(stack_images(toy_train[:2]))
    style = channel_stats(toy_backend.extract_low_features(toy_train[5].image))
    bank = bank_of(style, toy_backend)
    out = augment_features(f, bank, AdaptConfig(), torch.Generator().manual_seed(0))
    assert torch.allclose(channel_stats(out).mu, style.mu.expand(2, -1), atol=1e-4)


def test_augmentation_errors(toy_backend, toy_train):
    f = toy_backend.extract_low_features(toy_train[0].image)
    empty = StyleBank(np.zeros((0, 2, 8), dtype=np.float32), {"count": 0, "channels": 8, "encoder_id": toy_backend.id})
    with pytest.raises(ValidationError, match="empty"):
        augment_features(f, empty, AdaptConfig(), torch.Generator())
    wide = bank_of(channel_stats(torch.rand(1, 16, 4, 4, dtype=torch.float64)), toy_backend)
    with pytest.raises(ValidationError, match="channels"):
        augment_features(f, wide, AdaptConfig(), torch.Generator())


def test_own_stat_perturbation(toy_backend, toy_train):
    f = toy_backend.extract_low_features(stack_images(toy_train[:2]))
    generator = torch.Generator().manual_seed(3)
    first, second = perturb_own_stats(f, 20.0, generator), perturb_own_stats(f, 20.0, generator)
    assert not torch.equal(first, second)
    assert torch.equal(first, perturb_own_stats(f, 20.0, torch.Generator().manual_seed(3)))
    assert perturb_own_stats(f, NO_NOISE, generator) is f
    assert perturb_own_stats(f, None, generator) is f


def test_feature_cache_on_disk_matches_memory(tmp_path, toy_backend, toy_train):
    samples = toy_train[:4]
    memory = FeatureCache.build(toy_backend, samples)
    lazy = FeatureCache.on_demand(toy_backend, samples)
    disk = FeatureCache.build(toy_backend, samples, tmp_path / "cache")
    assert len(memory) == len(disk) == 4
    assert len(list((tmp_path / "cache").glob("*.features.npy"))) == 4
    for i, sample in enumerate(samples):
        expected = toy_backend.extract_low_features(sample.image)
        assert torch.equal(memory[i][0], expected) and torch.equal(disk[i][0], expected)
        assert torch.equal(disk[i][1], sample.label)
        assert torch.equal(lazy[i][0], expected) and torch.equal(lazy[i][1], sample.label)


def test_fine_tuning_is_the_same_from_any_cache(tmp_path, toy_backend, toy_train, trained):
    samples = toy_train[:4]
    bank = bank_of(channel_stats(toy_backend.extract_low_features(stack_images(toy_train[4:8]))), toy_backend)
    cfg = AdaptConfig(iterations=3, batch_size=2)
    on_the_fly = finetune_classifier(copy.deepcopy(trained), samples, bank, cfg)
    cached = finetune_classifier(
        copy.deepcopy(trained), samples, bank, cfg, FeatureCache.build(toy_backend, samples, tmp_path / "c")
    )
    assert state_equal(on_the_fly, cached)
    assert on_the_fly.provenance["adapted_with_bank"] == bank.content_hash()


def test_fine_tuning_updates_only_the_head_and_trainable_stages(toy_backend, toy_train, trained):
    bank = bank_of(channel_stats(toy_backend.extract_low_features(stack_images(toy_train[:4]))), toy_backend)
    low_before = trained.low_stage_checksum()
    adapted = finetune_classifier(copy.deepcopy(trained), toy_train, bank, AdaptConfig(iterations=5, batch_size=4))
    assert adapted.low_stage_checksum() == low_before
    assert not state_equal(adapted, trained)


def test_bank_from_another_encoder_is_refused(toy_backend, toy_train, trained):
    stats = channel_stats(toy_backend.extract_low_features(toy_train[0].image)[None])
    bank = StyleBank.from_stats(stats, encoder_id="toy-v1:L2:pm1")
    with pytest.raises(ManifestMismatchError):
        finetune_classifier(copy.deepcopy(trained), toy_train, bank, AdaptConfig(iterations=1))


def test_fine_tuning_from_scratch_warns(capsys, toy_backend, toy_train):
    bank = bank_of(channel_stats(toy_backend.extract_low_features(toy_train[0].image)[None]), toy_backend)
    finetune_classifier(fresh_model(toy_backend), toy_train[:2], bank, AdaptConfig(iterations=1, batch_size=1))
    assert "[WARN]" in capsys.readouterr().err


def test_cache_from_another_encoder_is_refused(toy_backend, toy_train, trained):
    cache = FeatureCache.build(ToyBackend(layer_split=2), toy_train[:2])
    with pytest.raises(ManifestMismatchError):
        finetune_classifier(copy.deepcopy(trained), toy_train[:2], None, AdaptConfig(iterations=1), cache)


def test_noise_free_source_only_g_equals_plain_fine_tuning(toy_train, trained):
    cfg = AdaptConfig(iterations=4, batch_size=2)
    plain = finetune_classifier(copy.deepcopy(trained), toy_train, None, cfg)
    noiseless = source_only_g_train(copy.deepcopy(trained), toy_train, cfg, snr_db=math.inf)
    assert state_equal(plain, noiseless)


def test_noise_changes_styles_but_not_batches(toy_train, trained):
    plain, noisy = RecordingSamples(toy_train), RecordingSamples(toy_train)
    cfg = AdaptConfig(iterations=4, batch_size=2)
    finetune_classifier(copy.deepcopy(trained), plain, None, cfg)
    source_only_g_train(copy.deepcopy(trained), noisy, cfg, snr_db=20.0)
    assert len(plain.reads) == 8
    assert plain.reads == noisy.reads


def test_identity_bank_matches_plain_fine_tuning(toy_backend, toy_train, trained):
    repeated = [toy_train[0]] * 4
    bank = bank_of(channel_stats(toy_backend.extract_low_features(toy_train[0].image)[None]), toy_backend)
    cfg = AdaptConfig(iterations=20, batch_size=2)
    with_bank = finetune_classifier(copy.deepcopy(trained), repeated, bank, cfg)
    without = finetune_classifier(copy.deepcopy(trained), repeated, None, cfg)
    a = evaluate_model(with_bank, toy_train[:4])["miou"]
    b = evaluate_model(without, toy_train[:4])["miou"]
    assert a == pytest.approx(b, abs=1e-3)


def test_checkpoint_round_trip(tmp_path, toy_backend, toy_train, trained):
    save_checkpoint(trained, tmp_path / "ckpt", {"seed": 0})
    loaded = load_checkpoint(tmp_path / "ckpt", toy_backend)
    assert state_equal(loaded, trained)
    assert loaded.provenance["source_trained"] is True
    assert loaded.loss_history == trained.loss_history
    assert torch.equal(loaded.predict(toy_train[0].image), trained.predict(toy_train[0].image))


def test_checkpoint_for_another_encoder_is_refused(tmp_path, trained):
    save_checkpoint(trained, tmp_path / "ckpt")
    with pytest.raises(ManifestMismatchError):
        load_checkpoint(tmp_path / "ckpt", ToyBackend(layer_split=2))


def test_truncated_checkpoint_is_rejected(tmp_path, toy_backend, trained):
    directory = save_checkpoint(trained, tmp_path / "ckpt")
    weights = directory / "weights.bin"
    weights.write_bytes(weights.read_bytes()[:100])
    with pytest.raises(ValidationError, match="truncated"):
        load_checkpoint(directory, toy_backend)


def test_poly_schedule_decays_to_zero():
    parameter = torch.nn.Parameter(torch.zeros(1))
    optimizer = torch.optim.SGD([parameter], lr=0.1)
    scheduler = _poly_schedule(optimizer, 10, 0.9)
    rates = []
    for _ in range(10):
        rates.append(optimizer.param_groups[0]["lr"])
        optimizer.step()
        scheduler.step()
    assert rates[0] == pytest.approx(0.1)
    assert all(a > b for a, b in zip(rates, rates[1:]))
    assert optimizer.param_groups[0]["lr"] == 0.0


@pytest.mark.parametrize(
    "config",
    [AdaptConfig(iterations=0), AdaptConfig(momentum=1.0), AdaptConfig(gauss_snr_db=float("nan")),
     SourceTrainConfig(color_jitter=1.0), SourceTrainConfig(lr_trunk=0.0)],
)
def test_invalid_training_configs(config):
    with pytest.raises(ValidationError):
        config.validate()


def test_toy_run_is_reproducible(tmp_path):
    config = RunConfig.toy()
    config = replace(
        config,
        mining=replace(config.mining, iterations=2),
        source_train=replace(config.source_train, iterations=3),
        adapt=replace(config.adapt, iterations=2),
    )
    first = _toy_run(5, config, tmp_path / "first", n_train=6, n_val=3)
    second = _toy_run(5, config, tmp_path / "second", n_train=6, n_val=3)
    assert first == second


@pytest.mark.slow
def test_style_bank_fine_tuning_recovers_shifted_accuracy(tmp_path):
    runs = [_toy_run(seed, RunConfig.toy(), tmp_path / f"seed_{seed}", n_train=64, n_val=32) for seed in range(3)]
    assert np.mean([run["clean_val_source_miou"] for run in runs]) > np.mean([run["source_miou"] for run in runs])
    assert np.mean([run["delta"] for run in runs]) >= 0.05


def _ablation_run(seed, root):
    config = RunConfig.toy().with_seed(seed)
    datasets = generate_toy_dataset(root, seed, n_train=64, n_val=32)
    backend = ToyBackend(layer_split=config.layer_split)
    train = list(load_dataset(datasets.train))
    shifted = list(load_dataset(datasets.shifted_val))
    source = train_source(fresh_model(backend, seed), train, config.source_train)
    results = {"source_raw": evaluate_model(source, shifted)["miou"]}
    continued = finetune_classifier(copy.deepcopy(source), train, None, config.adapt)
    results["source_only"] = evaluate_model(continued, shifted)["miou"]
    noisy = source_only_g_train(copy.deepcopy(source), train, config.adapt)
    results["source_only_g"] = evaluate_model(noisy, shifted)["miou"]

    target = mean_image_embedding(backend, stack_images(list(load_dataset(datasets.shifted_train))))
    features = backend.extract_low_features(stack_images(train))
    for init in INIT_MODES:
        bank = mine_bank(features, target, replace(config.mining, init=init), backend)
        adapted = finetune_classifier(copy.deepcopy(source), train, bank, config.adapt)
        results[f"init_{init}"] = evaluate_model(adapted, shifted)["miou"]
    return results


@pytest.mark.slow
def test_ablation_orderings(tmp_path):
    runs = [_ablation_run(seed, tmp_path / f"seed_{seed}") for seed in range(3)]
    mean = {key: float(np.mean([run[key] for run in runs])) for key in runs[0]}
    assert mean["source_only_g"] >= mean["source_only"]
    assert mean["init_source"] >= mean["init_identity"] >= mean["init_random"]
