import json

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from conftest import stack_images
from core_stats import StyleStats, channel_stats, cosine_distance, pin_apply
from encoder_backends import mean_image_embedding
from errors import BankChannelError, BankLengthError, BankVersionError, MiningError, ValidationError
from pipeline_io import generate_toy_dataset, load_dataset
from style_mining import (
    MANIFEST_FILE,
    STYLES_FILE,
    MiningConfig,
    StyleBank,
    bank_diversity_report,
    load_bank,
    mine_bank,
    mine_batch,
    mine_style,
    save_bank,
)


@pytest.fixture(scope="module")
def source_features(toy_backend, toy_train):
    return toy_backend.extract_low_features(stack_images(toy_train))


@pytest.fixture(scope="module")
def target_embedding(toy_backend, toy_data):
    shifted = stack_images(list(load_dataset(toy_data.shifted_train)))
    return mean_image_embedding(toy_backend, shifted)


def test_zero_iterations_return_source_statistics(toy_backend, source_features, target_embedding):
    f = source_features[0]
    mined = mine_style(f, target_embedding, MiningConfig.toy(iterations=0), toy_backend)
    expected = channel_stats(f)
    assert torch.equal(mined.mu, expected.mu)
    assert torch.equal(mined.sigma, expected.sigma)


def test_stationary_point_keeps_source_statistics(toy_backend, source_features):
    f = source_features[1]
    start = channel_stats(f)
    with torch.no_grad():
        target = toy_backend.embed_from_features(pin_apply(f, start))
    mined = mine_style(f, target, MiningConfig.toy(iterations=50), toy_backend)
    assert (mined.mu - start.mu).abs().max() <= 1e-6
    assert (mined.sigma - start.sigma).abs().max() <= 1e-6


def test_mining_lowers_the_loss_for_most_instances(tmp_path, toy_backend, target_embedding):
    datasets = generate_toy_dataset(tmp_path, seed=5, n_train=64, n_val=1)
    features = toy_backend.extract_low_features(stack_images(list(load_dataset(datasets.train))))
    mined = mine_batch(features, target_embedding, MiningConfig.toy(iterations=100), toy_backend)
    improved = (mined.final_loss < mined.initial_loss).float().mean().item()
    assert features.shape[0] == 64
    assert improved >= 0.95


def test_instances_are_mined_independently(toy_backend, source_features, target_embedding):
    cfg = MiningConfig.toy(iterations=20)
    together = mine_batch(source_features[:4], target_embedding, cfg, toy_backend)
    for i in range(4):
        alone = mine_style(source_features[i], target_embedding, cfg, toy_backend)
        assert (together.stats.mu[i] - alone.mu).abs().max() <= 1e-5
        assert (together.stats.sigma[i] - alone.sigma).abs().max() <= 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradient_matches_finite_differences(toy_backend, source_features, seed):
    generator = torch.Generator().manual_seed(seed)
    f = source_features[seed % source_features.shape[0]]
    target = torch.randn(toy_backend.embedding_dim, generator=generator, dtype=torch.float64)
    start = channel_stats(f)
    mu = (start.mu + 0.1 * torch.randn(8, generator=generator, dtype=torch.float64)).requires_grad_(True)
    sigma = (start.sigma * (1 + 0.1 * torch.rand(8, generator=generator, dtype=torch.float64))).requires_grad_(True)

    def loss(m, s):
        return cosine_distance(toy_backend.embed_from_features(pin_apply(f, StyleStats(m, s))), target)

    assert gradcheck(loss, (mu, sigma), eps=1e-6, atol=1e-6, rtol=1e-3)


# ReLU kinks in the encoder sit within a 1e-3 step of some pre-activations, so a
# central difference at that step only agrees with autograd to about 5e-3.
FD_STEP = 1e-3
FD_TOLERANCE = 1e-2


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradient_matches_central_differences_at_coarse_step(toy_backend, source_features, seed):
    generator = torch.Generator().manual_seed(seed)
    f = source_features[seed % source_features.shape[0]]
    target = torch.randn(toy_backend.embedding_dim, generator=generator, dtype=torch.float64)
    start = channel_stats(f)
    params = torch.cat(
        [
            start.mu + 0.1 * torch.randn(8, generator=generator, dtype=torch.float64),
            start.sigma * (1 + 0.1 * torch.rand(8, generator=generator, dtype=torch.float64)),
        ]
    )

    def loss(flat):
        style = StyleStats(flat[:8], flat[8:])
        return cosine_distance(toy_backend.embed_from_features(pin_apply(f, style)), target)

    leaf = params.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(loss(leaf), leaf)
    numeric = torch.empty_like(params)
    with torch.no_grad():
        for i in range(params.numel()):
            step = torch.zeros_like(params)
            step[i] = FD_STEP
            numeric[i] = (loss(params + step) - loss(params - step)) / (2 * FD_STEP)
    scale = max(analytic.norm().item(), numeric.norm().item())
    assert (analytic - numeric).norm().item() <= FD_TOLERANCE * scale


def test_bank_keeps_source_order_and_cardinality(toy_backend, source_features, target_embedding):
    cfg = MiningConfig.toy(iterations=5, batch_size=3)
    serial = mine_bank(source_features, target_embedding, cfg, toy_backend, workers=1)
    parallel = mine_bank(list(source_features), target_embedding, cfg, toy_backend, workers=3)
    assert len(serial) == source_features.shape[0]
    assert np.array_equal(serial.data, parallel.data)
    assert serial.manifest["encoder_id"] == toy_backend.id
    assert serial.manifest["target"]["kind"] == "embedding"


def test_bank_records_loss_trajectory(toy_backend, source_features, target_embedding):
    bank = mine_bank(source_features[:8], target_embedding, MiningConfig.toy(iterations=30), toy_backend)
    assert bank.manifest["mean_final_loss"] < bank.manifest["mean_initial_loss"]


def test_empty_feature_stream_is_rejected(toy_backend, target_embedding):
    with pytest.raises(ValidationError):
        mine_bank([], target_embedding, MiningConfig.toy(), toy_backend)


def test_zero_target_is_rejected(toy_backend, source_features):
    with pytest.raises(ValidationError):
        mine_style(source_features[0], torch.zeros(16, dtype=torch.float64), MiningConfig.toy(), toy_backend)


def test_init_modes(toy_backend, source_features, target_embedding):
    f = source_features[:2]
    identity = mine_batch(f, target_embedding, MiningConfig.toy(iterations=0, init="identity"), toy_backend)
    assert torch.equal(identity.stats.mu, torch.zeros(2, 8, dtype=torch.float64))
    assert torch.equal(identity.stats.sigma, torch.ones(2, 8, dtype=torch.float64))

    random_cfg = MiningConfig.toy(iterations=0, init="random", seed=3)
    first = mine_batch(f, target_embedding, random_cfg, toy_backend)
    second_alone = mine_batch(f[1:], target_embedding, random_cfg, toy_backend, first_index=1)
    assert torch.equal(first.stats.mu[1], second_alone.stats.mu[0])


@pytest.mark.parametrize(
    "overrides",
    [dict(learning_rate=0.0), dict(momentum=1.0), dict(batch_size=0), dict(iterations=-1), dict(init="zeros")],
)
def test_invalid_mining_config_is_rejected(overrides):
    with pytest.raises(ValidationError):
        MiningConfig(**overrides).validate()


def test_mining_error_names_iteration_and_source():
    error = MiningError("non-finite loss", iteration=7, source_index=3)
    assert "iteration 7" in str(error) and "source index 3" in str(error)
    assert error.exit_code == 3


def small_bank(toy_backend, source_features, target_embedding) -> StyleBank:
    return mine_bank(source_features[:4], target_embedding, MiningConfig.toy(iterations=3), toy_backend)


def test_bank_round_trip_is_bit_exact(tmp_path, toy_backend, source_features, target_embedding):
    bank = small_bank(toy_backend, source_features, target_embedding)
    save_bank(bank, tmp_path / "bank")
    loaded = load_bank(tmp_path / "bank")
    assert loaded.data.tobytes() == bank.data.tobytes()
    assert loaded.manifest == bank.manifest
    assert (tmp_path / "bank" / STYLES_FILE).stat().st_size == 4 * 2 * 8 * 4


def test_bank_version_mismatch(tmp_path, toy_backend, source_features, target_embedding):
    directory = save_bank(small_bank(toy_backend, source_features, target_embedding), tmp_path / "bank")
    manifest = json.loads((directory / MANIFEST_FILE).read_text())
    manifest["format_version"] = 99
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest))
    with pytest.raises(BankVersionError):
        load_bank(directory)


def test_bank_truncated_blob(tmp_path, toy_backend, source_features, target_embedding):
    directory = save_bank(small_bank(toy_backend, source_features, target_embedding), tmp_path / "bank")
    blob = (directory / STYLES_FILE).read_bytes()
    (directory / STYLES_FILE).write_bytes(blob[:-3])
    with pytest.raises(BankLengthError, match="expected 256 bytes, found 253"):
        load_bank(directory)


def test_bank_missing_whole_entries_reports_sizes(tmp_path, toy_backend, source_features, target_embedding):
    directory = save_bank(small_bank(toy_backend, source_features, target_embedding), tmp_path / "bank")
    blob = (directory / STYLES_FILE).read_bytes()
    (directory / STYLES_FILE).write_bytes(blob[:-32])
    with pytest.raises(BankChannelError, match="expected 256 bytes, found 224"):
        load_bank(directory)


def test_unknown_target_kind_is_rejected(toy_backend, source_features, target_embedding):
    with pytest.raises(ValidationError, match="kind"):
        mine_bank(
            source_features[:2], target_embedding, MiningConfig.toy(iterations=1), toy_backend, target={"kind": "photo"}
        )


def test_bank_channel_mismatch(tmp_path, toy_backend, source_features, target_embedding):
    directory = save_bank(small_bank(toy_backend, source_features, target_embedding), tmp_path / "bank")
    manifest = json.loads((directory / MANIFEST_FILE).read_text())
    manifest["channels"] = 16
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest))
    with pytest.raises(BankChannelError):
        load_bank(directory)


def test_diversity_is_positive_on_distinct_inputs(toy_backend, source_features, target_embedding):
    bank = mine_bank(source_features, target_embedding, MiningConfig.toy(iterations=10), toy_backend)
    report = bank_diversity_report(bank)
    assert report.count == 16
    assert report.diversity_score > 0
    assert len(report.to_dict()["mu"]["outliers"]) == 8


def test_diversity_flags_tukey_outliers():
    data = np.zeros((9, 2, 1), dtype=np.float32)
    data[:, 0, 0] = [1, 2, 3, 4, 5, 6, 7, 8, 100]
    data[:, 1, 0] = 1.0
    bank = StyleBank.from_stats(
        StyleStats(torch.from_numpy(data[:, 0].copy()), torch.from_numpy(data[:, 1].copy())), encoder_id="toy"
    )
    report = bank_diversity_report(bank)
    assert report.mu.outliers == [[100.0]]
    assert report.sigma.outliers == [[]]


def test_identical_styles_have_zero_diversity():
    mu = torch.tensor([[0.5, -1.0, 2.0]]).repeat(5, 1)
    sigma = torch.tensor([[1.0, 0.25, 3.0]]).repeat(5, 1)
    report = bank_diversity_report(StyleBank.from_stats(StyleStats(mu, sigma), encoder_id="toy"))
    assert report.diversity_score == 0.0
    assert report.mu.outliers == [[], [], []]


def test_quartiles_of_four_styles_interpolate_between_sorted_values():
    generator = torch.Generator().manual_seed(3)
    mu = torch.randn(4, 6, generator=generator)
    sigma = torch.rand(4, 6, generator=generator) + 0.5
    report = bank_diversity_report(StyleBank.from_stats(StyleStats(mu, sigma), encoder_id="toy"))
    ordered = np.sort(mu.numpy().astype(np.float64), axis=0)
    a, b, c, d = ordered
    assert np.allclose(report.mu.q1, a + 0.75 * (b - a))
    assert np.allclose(report.mu.median, (b + c) / 2)
    assert np.allclose(report.mu.q3, c + 0.25 * (d - c))
    assert np.allclose(report.mu.minimum, a) and np.allclose(report.mu.maximum, d)


def test_diversity_needs_two_styles():
    bank = StyleBank.from_stats(StyleStats(torch.zeros(1, 4), torch.ones(1, 4)), encoder_id="toy")
    with pytest.raises(ValidationError):
        bank_diversity_report(bank)
