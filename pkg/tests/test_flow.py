import time

import numpy as np
import pytest

from genplan.flow import (
    DIM,
    FlowFormatError,
    FlowModel,
    TrainConfig,
    TrainingDivergence,
    Whitening,
    gaussian_baseline_nll,
    mean_nll,
    nll_and_grad,
    train,
)


def make_random_flow(seed=1, scale=0.5):
    rng = np.random.default_rng(seed)
    wh = Whitening(np.array([3.0, 0.1, -0.2, 0.05]), np.array([1.5, 0.4, 0.5, 0.3]))
    model = FlowModel.create(wh, seed=seed)
    model.set_params(rng.normal(0.0, scale, model.n_params))
    return model


def test_identity_initialization_restores_whitening():
    wh = Whitening(np.array([2.0, -0.5, 0.3, 0.0]), np.array([1.2, 0.3, 0.6, 0.25]))
    model = FlowModel.create(wh, seed=0)
    z = np.random.default_rng(0).standard_normal((200, 4))
    theta, logdet = model.forward(z)
    assert np.allclose(theta, wh.restore(z), atol=1e-14)
    assert np.allclose(logdet, np.sum(np.log(wh.std)), atol=1e-12)


def test_log_prob_at_whitening_center():
    wh = Whitening(np.array([2.0, -0.5, 0.3, 0.0]), np.array([1.2, 0.3, 0.6, 0.25]))
    model = FlowModel.create(wh, seed=0)
    lp = model.log_prob(wh.restore(np.zeros((1, 4))))[0]
    expected = -0.5 * DIM * np.log(2 * np.pi) - np.sum(np.log(wh.std))
    assert abs(lp - expected) < 1e-12


def test_forward_inverse_roundtrip_many_draws():
    model = make_random_flow()
    z = np.random.default_rng(2).standard_normal((10000, 4))
    theta, logdet_f = model.forward(z)
    z_back, logdet_i = model.inverse(theta)
    assert np.abs(z_back - z).max() < 1e-6
    assert np.abs(logdet_f + logdet_i).max() < 1e-6


def test_analytic_gradient_matches_finite_differences():
    model = make_random_flow(seed=4)
    rng = np.random.default_rng(8)
    batch = model.whitening.restore(rng.standard_normal((64, 4)))
    _, grad = nll_and_grad(model, batch)
    p0 = model.get_params()
    eps = 1e-5
    idx = rng.choice(p0.size, 50, replace=False)
    worst = 0.0
    for j in idx:
        pp = p0.copy()
        pp[j] += eps
        model.set_params(pp)
        up = mean_nll(model, batch)
        pm = p0.copy()
        pm[j] -= eps
        model.set_params(pm)
        dn = mean_nll(model, batch)
        fd = (up - dn) / (2 * eps)
        rel = abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-8)
        worst = max(worst, rel)
    model.set_params(p0)
    assert worst < 1e-4


def test_sample_empty_and_batched():
    model = make_random_flow()
    assert model.sample(0, np.random.default_rng(0)).shape == (0, 4)
    out = model.sample(257, np.random.default_rng(0))
    assert out.shape == (257, 4)
    assert np.all(np.isfinite(out))


def test_identity_model_sample_statistics():
    wh = Whitening(np.array([2.0, -0.5, 0.3, 0.0]), np.array([1.2, 0.3, 0.6, 0.25]))
    model = FlowModel.create(wh, seed=0)
    n = 100000
    draws = model.sample(n, np.random.default_rng(3))
    se_mean = wh.std / np.sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - wh.mean) < 3 * se_mean)
    # sd of a sample sd is approx sd/sqrt(2n)
    se_std = wh.std / np.sqrt(2 * n)
    assert np.all(np.abs(draws.std(axis=0) - wh.std) < 3 * se_std)


def test_sampling_throughput():
    model = make_random_flow()
    rng = np.random.default_rng(0)
    model.sample(1000, rng)  # warmup
    t0 = time.perf_counter()
    n = 50000
    model.sample(n, rng)
    rate = n / (time.perf_counter() - t0)
    assert rate >= 1000.0


def test_local_smoothness_is_finite():
    model = make_random_flow()
    rng = np.random.default_rng(9)
    z1 = rng.standard_normal((1000, 4))
    z2 = z1 + rng.uniform(-1, 1, (1000, 4)) * 0.02
    gap = np.linalg.norm(z2 - z1, axis=1)
    t1, _ = model.forward(z1)
    t2, _ = model.forward(z2)
    ratio = np.linalg.norm(t2 - t1, axis=1) / gap
    assert np.all(np.isfinite(ratio))
    print(f"empirical local Lipschitz bound over 1000 pairs: {ratio.max():.3f}")


def test_training_improves_log_prob_and_beats_gaussian(three_mode_data, three_mode_result):
    data, _ = three_mode_data
    res = three_mode_result
    assert res.train_nll[-1] < res.train_nll[0]
    cfg = TrainConfig(seed=3)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(data.shape[0])
    n_val = max(int(round(cfg.val_fraction * data.shape[0])), 1)
    val, tr = data[perm[:n_val]], data[perm[n_val:]]
    assert mean_nll(res.model, val) < gaussian_baseline_nll(tr, val)


def test_training_smoothed_curve_non_increasing(three_mode_result):
    nll = np.array(three_mode_result.train_nll)
    smooth = np.convolve(nll, np.ones(10) / 10, mode="valid")
    running_min = np.minimum.accumulate(smooth)
    assert np.all(smooth <= running_min + 0.05)


def test_three_mode_recovery(three_mode_data, three_mode_result):
    _, centers = three_mode_data
    samples = three_mode_result.model.sample(10000, np.random.default_rng(11))
    d2 = ((samples[:, None, :] - centers[None]) ** 2).sum(axis=2)
    frac = np.bincount(d2.argmin(axis=1), minlength=3) / samples.shape[0]
    assert np.all(frac >= 0.10)


def test_monte_carlo_normalization(three_mode_data, three_mode_result):
    data, _ = three_mode_data
    model = three_mode_result.model
    mu = data.mean(axis=0)
    cov = np.cov(data.T) * 4.0
    chol = np.linalg.cholesky(cov)
    rng = np.random.default_rng(99)
    x = mu + rng.standard_normal((10**6, 4)) @ chol.T
    diff = x - mu
    sol = np.linalg.solve(cov, diff.T).T
    logq = -0.5 * np.sum(diff * sol, axis=1) - 0.5 * np.linalg.slogdet(2 * np.pi * cov)[1]
    z_hat = np.exp(model.log_prob(x) - logq).mean()
    assert 0.97 <= z_hat <= 1.03


def test_training_divergence_aborts(three_mode_data):
    data, _ = three_mode_data
    with pytest.raises(TrainingDivergence):
        train(data, TrainConfig(seed=3, learning_rate=1e6, epochs=5))


def test_training_input_validation(three_mode_data):
    data, _ = three_mode_data
    with pytest.raises(ValueError):
        train(data[:50], TrainConfig())
    with pytest.raises(ValueError):
        train(data, TrainConfig(batch_size=100000))
    with pytest.raises(ValueError):
        train(data, TrainConfig(epochs=0))


def test_save_load_roundtrip(tmp_path, three_mode_result):
    model = three_mode_result.model
    f = tmp_path / "model.gpnf"
    model.save(f, config_hash=b"\x07" * 32, tool_version="0.1.0")
    loaded, config_hash, tool_version = FlowModel.load(f)
    assert config_hash == b"\x07" * 32
    assert tool_version == "0.1.0"
    assert np.array_equal(loaded.get_params(), model.get_params())
    assert np.array_equal(loaded.whitening.mean, model.whitening.mean)
    assert np.array_equal(loaded.whitening.std, model.whitening.std)
    z = np.random.default_rng(1).standard_normal((500, 4))
    t0, l0 = model.forward(z)
    t1, l1 = loaded.forward(z)
    assert np.array_equal(t0, t1)
    assert np.array_equal(l0, l1)
    assert loaded.checksum() == model.checksum()


def test_load_rejects_bad_files(tmp_path, three_mode_result):
    model = three_mode_result.model
    f = tmp_path / "model.gpnf"
    model.save(f)
    raw = f.read_bytes()

    truncated = tmp_path / "trunc.gpnf"
    truncated.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FlowFormatError):
        FlowModel.load(truncated)

    bad_magic = tmp_path / "magic.gpnf"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FlowFormatError):
        FlowModel.load(bad_magic)

    bad_version = tmp_path / "version.gpnf"
    bad_version.write_bytes(raw[:4] + b"\x63\x00" + raw[6:])
    with pytest.raises(FlowFormatError):
        FlowModel.load(bad_version)

    trailing = tmp_path / "trailing.gpnf"
    trailing.write_bytes(raw + b"\x00")
    with pytest.raises(FlowFormatError):
        FlowModel.load(trailing)
