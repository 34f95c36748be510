import numpy as np
import pytest

from quam import models as M
from quam.data import LabeledDataset, gen_sine
from quam.rng import derive_rng


def blobs(n=100, seed=0):
    rng = derive_rng(seed)
    half = n // 2
    x = np.vstack([rng.normal([-2.0, 0.0], 0.4, (half, 2)), rng.normal([2.0, 0.0], 0.4, (half, 2))])
    y = np.array([0] * half + [1] * half)
    return LabeledDataset(x, y, "classification")


def test_zero_params_categorical_uniform():
    arch = M.ArchSpec((2, 4, 3))
    params = M.ModelParams(arch, np.zeros(arch.param_count()))
    dist = M.predict(params, np.array([0.4, -1.0]))
    assert np.allclose(dist.probs, 1.0 / 3.0)


def test_zero_params_gaussian_standard():
    arch = M.ArchSpec((1, 4, 2), head="gaussian_scalar")
    params = M.ModelParams(arch, np.zeros(arch.param_count()))
    dist = M.predict(params, np.array([0.7]))
    assert dist.mean == 0.0
    assert dist.variance == 1.0


def test_predict_deterministic():
    arch = M.ArchSpec((3, 5, 4))
    params = M.init_params(arch, 11)
    x = derive_rng(1).normal(size=3)
    d1 = M.predict(params, x)
    d2 = M.predict(params, x)
    assert np.array_equal(d1.probs, d2.probs)


def test_predict_rejects_wrong_width():
    arch = M.ArchSpec((3, 5, 2))
    params = M.init_params(arch, 0)
    with pytest.raises(ValueError, match="input width"):
        M.predict(params, np.array([1.0, 2.0]))


def test_train_separable_blobs_to_full_accuracy():
    data = blobs(100)
    params = M.train(data, M.ArchSpec((2, 8, 2)), M.TrainConfig(epochs=150, seed=1))
    acc = (M.predict_batch(params, data.x).argmax(1) == data.y).mean()
    assert acc == 1.0


def test_train_sine_fits_below_noise_floor():
    # targets carry variance-0.1 noise, so the fit is judged against the
    # clean signal
    data = gen_sine(200, seed=5)
    params = M.train(data, M.ArchSpec((1, 32, 2), head="gaussian_scalar"), M.TrainConfig(epochs=400, seed=2))
    mean = M.predict_batch(params, data.x)[:, 0]
    assert ((mean - np.sin(data.x[:, 0])) ** 2).mean() < 0.05


def test_zero_epochs_returns_initialization():
    data = blobs(20)
    arch = M.ArchSpec((2, 4, 2))
    params = M.train(data, arch, M.TrainConfig(epochs=0, seed=9))
    assert np.array_equal(params.values, M.init_params(arch, 9).values)


def test_training_is_seed_deterministic():
    data = blobs(60, seed=3)
    arch = M.ArchSpec((2, 6, 2))
    cfg = M.TrainConfig(epochs=40, batch_size=16, seed=7)
    p1 = M.train(data, arch, cfg)
    p2 = M.train(data, arch, cfg)
    assert np.array_equal(p1.values, p2.values)


def test_training_reduces_loss():
    data = blobs(80, seed=5)
    arch = M.ArchSpec((2, 8, 2))
    init_loss = M.mean_train_loss(M.init_params(arch, 4), data)
    final_loss = M.mean_train_loss(M.train(data, arch, M.TrainConfig(epochs=60, seed=4)), data)
    assert final_loss <= init_loss


def test_nan_loss_aborts_with_location():
    data = blobs(40)
    arch = M.ArchSpec((2, 4, 2))
    with np.errstate(all="ignore"), pytest.raises(M.TrainingDiverged) as err:
        M.train(data, arch, M.TrainConfig(lr=1e200, epochs=3, seed=0))
    assert err.value.epoch >= 0 and err.value.batch >= 0


def test_log_posterior_equal_params_equal_values():
    data = blobs(30)
    arch = M.ArchSpec((2, 4, 2))
    a = M.init_params(arch, 2)
    b = M.ModelParams(arch, a.values.copy())
    assert M.log_posterior(a, data, 0.5) == M.log_posterior(b, data, 0.5)


def test_log_posterior_perfect_predictions_zero():
    # direct logits, no hidden layer: make the true class logit huge
    arch = M.ArchSpec((2, 2))
    data = blobs(10)
    values = np.zeros(arch.param_count())
    values[0] = -2000.0  # w[x0 -> class0] : x0 negative for class 0
    values[1] = 2000.0
    params = M.ModelParams(arch, values)
    assert abs(M.log_posterior(params, data, 0.0)) < 1e-9


def test_log_posterior_matches_pointwise_oracle():
    rng = derive_rng(8)
    data = LabeledDataset(rng.normal(size=(10, 3)), rng.integers(0, 3, 10), "classification")
    arch = M.ArchSpec((3, 6, 3))
    params = M.init_params(arch, 1)
    lam = 0.7
    total = 0.0
    for i in range(10):
        probs = M.predict(params, data.x[i]).probs
        total -= -np.log(probs[data.y[i]])  # oracle accumulates +log p
    expected = total - 0.5 * lam * float(params.values @ params.values)
    assert abs(M.log_posterior(params, data, lam) - expected) < 1e-10


def test_log_posterior_invariant_under_permutation():
    rng = derive_rng(9)
    data = LabeledDataset(rng.normal(size=(25, 2)), rng.integers(0, 2, 25), "classification")
    arch = M.ArchSpec((2, 5, 2))
    params = M.init_params(arch, 3)
    perm = derive_rng(10).permutation(25)
    shuffled = LabeledDataset(data.x[perm], data.y[perm], "classification")
    assert abs(M.log_posterior(params, data, 0.1) - M.log_posterior(params, shuffled, 0.1)) < 1e-10


def test_mean_train_loss_perfect_and_uniform():
    arch = M.ArchSpec((2, 3))
    data = blobs(10)
    uniform = M.ModelParams(arch, np.zeros(arch.param_count()))
    data3 = LabeledDataset(data.x, np.zeros(len(data), dtype=int), "classification")
    assert abs(M.mean_train_loss(uniform, data3) - np.log(3.0)) < 1e-12


def test_mean_train_loss_matches_pointwise_oracle():
    rng = derive_rng(11)
    data = LabeledDataset(rng.normal(size=(12, 2)), rng.integers(0, 2, 12), "classification")
    params = M.init_params(M.ArchSpec((2, 4, 2)), 6)
    oracle = np.mean([-np.log(M.predict(params, data.x[i]).probs[data.y[i]]) for i in range(12)])
    assert abs(M.mean_train_loss(params, data) - oracle) < 1e-12


def test_posterior_weight_values():
    data = blobs(10)
    params = M.init_params(M.ArchSpec((2, 4, 2)), 0)
    # loss 0 -> weight 1 is a direct consequence of the formula
    assert M.posterior_weight(params, data, 1.0) == pytest.approx(np.exp(-M.mean_train_loss(params, data)))


def test_posterior_weight_ratio():
    # losses {0.1, 0.2} at T=0.05 give a ratio of e^2
    w1 = np.exp(-0.1 / 0.05)
    w2 = np.exp(-0.2 / 0.05)
    assert w1 / w2 == pytest.approx(np.exp(2.0), rel=1e-12)


def test_posterior_weight_monotone_in_loss():
    data = blobs(40, seed=12)
    arch = M.ArchSpec((2, 6, 2))
    models = [M.init_params(arch, s) for s in range(6)]
    for temp in (0.05, 0.5, 2.0):
        losses = np.array([M.mean_train_loss(p, data) for p in models])
        weights = np.array([M.posterior_weight(p, data, temp) for p in models])
        assert np.array_equal(np.argsort(-weights), np.argsort(losses))


def test_categorical_probs_valid_for_random_params():
    rng = derive_rng(13)
    for s in range(10):
        arch = M.ArchSpec((3, int(rng.integers(2, 12)), int(rng.integers(2, 6))))
        probs = M.predict_batch(M.init_params(arch, s), rng.normal(size=(20, 3)) * 5)
        assert (probs >= 0).all() and (probs <= 1).all()
        assert np.abs(probs.sum(1) - 1).max() < 1e-12


def test_checkpoint_round_trip_bit_identical(tmp_path):
    arch = M.ArchSpec((4, 7, 3), dropout_prob=0.25)
    params = M.init_params(arch, 17)
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(params, path)
    loaded = M.load_checkpoint(path)
    assert loaded.arch == arch
    assert np.array_equal(loaded.values, params.values)
    M.save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "model.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_magic_and_layout(tmp_path):
    # gaussian head of width 1 is encoded with tag byte 1
    arch = M.ArchSpec((2, 1), head="gaussian_scalar")
    params = M.init_params(arch, 0)
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(params, path)
    blob = path.read_bytes()
    assert blob[:8] == b"QUAMCKPT"
    assert int.from_bytes(blob[8:12], "little") == 1
    assert int.from_bytes(blob[12:16], "little") == 2  # two layer widths
    assert blob[24] == 1  # head tag


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 32)
    with pytest.raises(ValueError, match="magic"):
        M.load_checkpoint(path)


def test_dropout_masks_preserve_expectation():
    arch = M.ArchSpec((2, 400, 2), dropout_prob=0.3)
    rng = derive_rng(14)
    masks = [M.make_dropout_masks(arch, rng)[0] for _ in range(200)]
    assert abs(np.mean(masks) - 1.0) < 0.02
