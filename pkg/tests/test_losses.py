import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from fieldseg.losses import (TanimotoConfig, UnsupervisableBatchError, fractal_tanimoto, masked_loss, tanimoto,
                             tanimoto_with_complement)

Y = np.array([1.0, 0.0])
P = np.array([0.5, 0.5])


def test_tanimoto_identity():
    assert tanimoto(Y, Y, 0) == 1.0


def test_tanimoto_hand_values():
    # <y,p> = 0.5, <y,y> + <p,p> = 1.5
    assert tanimoto(Y, P, 0) == 0.5                    # 0.5 / (1.5 - 0.5)
    assert abs(tanimoto(Y, P, 1) - 1 / 3) < 1e-15      # 0.5 / (2*1.5 - 3*0.5)
    y = np.array([1.0, 1.0, 0.0, 0.0])
    p = np.array([1.0, 0.5, 0.5, 0.0])
    # <y,p> = 1.5, sum of squares = 3.5, d=2: 1.5 / (4*3.5 - 7*1.5) = 3/7
    assert abs(tanimoto(y, p, 2) - 3 / 7) < 1e-15


def test_tanimoto_with_complement_hand_value():
    assert tanimoto_with_complement(Y, P, 0) == 0.5


def test_empty_inputs_count_as_agreement():
    z = np.zeros(4)
    assert tanimoto(z, z, 0) == 1.0
    assert tanimoto(torch.zeros(4), torch.zeros(4), 3).item() == 1.0


def test_tanimoto_rejects_bad_args():
    with pytest.raises(ValueError):
        tanimoto(Y, np.zeros(3))
    with pytest.raises(ValueError):
        tanimoto(Y, P, -1)
    with pytest.raises(ValueError):
        TanimotoConfig(epsilon=0)


def test_fractal_tanimoto_is_mean_over_depths():
    expected = (tanimoto(Y, P, 0) + tanimoto(Y, P, 1) + tanimoto(Y, P, 2)) / 3
    assert fractal_tanimoto(Y, P, 2) == pytest.approx(expected, abs=1e-15)


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 5))
def test_complement_symmetry(seed, d):
    rng = np.random.default_rng(seed)
    y = rng.random(30)
    p = rng.random(30)
    a = tanimoto_with_complement(y, p, d)
    b = tanimoto_with_complement(1 - y, 1 - p, d)
    assert a == pytest.approx(b, abs=1e-12)


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 5))
def test_tanimoto_in_unit_interval(seed, d):
    rng = np.random.default_rng(seed)
    y, p = rng.random(20), rng.random(20)
    t = tanimoto(y, p, d)
    assert 0.0 <= t <= 1.0 + 1e-12


def test_torch_and_numpy_agree(rng):
    y, p = rng.random((2, 5, 5)), rng.random((2, 5, 5))
    for d in range(4):
        a = tanimoto(y, p, d, dims=(1, 2))
        b = tanimoto(torch.from_numpy(y), torch.from_numpy(p), d, dims=(1, 2)).numpy()
        np.testing.assert_allclose(a, b, rtol=1e-12)


def _stack(y, mask=None):
    mask = np.ones_like(y[0]) if mask is None else mask
    return np.concatenate([y, mask[None]], axis=0)


def test_masked_loss_single_task_hand_value():
    pred = torch.tensor([[[0.5, 0.5]], [[0.0, 0.0]], [[0.0, 0.0]]], dtype=torch.float64)
    lab = torch.tensor(_stack(np.array([[[1.0, 0.0]], [[0.0, 0.0]], [[0.0, 0.0]]])), dtype=torch.float64)
    loss = masked_loss(pred, lab, TanimotoConfig(d=0), weights=(1, 0, 0))
    assert loss.item() == 0.5


def test_masked_loss_perfect_prediction_is_zero(rng):
    y = (rng.random((3, 8, 8)) > 0.5).astype(np.float64)
    mask = (rng.random((8, 8)) > 0.3).astype(np.float64)
    lab = torch.from_numpy(_stack(y, mask))
    pred = torch.from_numpy(y * mask + rng.random((3, 8, 8)) * (1 - mask))
    assert masked_loss(pred, lab).item() == 0.0


def test_masked_loss_empty_mask_raises():
    lab = torch.zeros(4, 4, 4)
    with pytest.raises(UnsupervisableBatchError, match="unsupervisable"):
        masked_loss(torch.rand(3, 4, 4), lab)


def test_masked_loss_range(rng):
    for _ in range(20):
        y = (rng.random((2, 3, 6, 6)) > 0.5).astype(np.float64)
        lab = torch.from_numpy(np.concatenate([y, np.ones((2, 1, 6, 6))], axis=1))
        w = tuple(rng.uniform(0, 2, 3))
        loss = masked_loss(torch.from_numpy(rng.random((2, 3, 6, 6))), lab, TanimotoConfig(d=2), w).item()
        assert 0.0 <= loss <= sum(w) + 1e-12


@pytest.mark.parametrize("d", [0, 2, 5])
def test_masked_loss_gradient_zero_on_masked_pixels(d, rng):
    y = (rng.random((1, 3, 6, 6)) > 0.5).astype(np.float64)
    mask = (rng.random((1, 1, 6, 6)) > 0.5).astype(np.float64)
    lab = torch.from_numpy(np.concatenate([y, mask], axis=1))
    pred = torch.tensor(rng.random((1, 3, 6, 6)), requires_grad=True)
    masked_loss(pred, lab, TanimotoConfig(d=d)).backward()
    g = pred.grad.numpy()
    assert np.all(g[:, :, mask[0, 0] == 0] == 0.0)


@pytest.mark.parametrize("d", [0, 2, 5])
def test_monotone_sharpening(d, rng):
    y = (rng.random((3, 8, 8)) > 0.5).astype(np.float64)
    lab = torch.from_numpy(_stack(y))
    losses = []
    for a in np.linspace(0, 0.5, 11):
        pred = torch.from_numpy((1 - a) * y + a * (1 - y))
        losses.append(masked_loss(pred, lab, TanimotoConfig(d=d)).item())
    assert losses[0] == 0.0
    assert all(b > a for a, b in zip(losses, losses[1:]))


def test_average_over_depths_config():
    cfg = TanimotoConfig(d=3, average_over_depths=True)
    assert cfg.depths == (0, 1, 2, 3)
    assert TanimotoConfig(d=3).depths == (3,)


def test_mismatched_shapes_raise():
    with pytest.raises(ValueError):
        masked_loss(torch.rand(3, 4, 4), torch.ones(4, 4, 5))
    with pytest.raises(ValueError):
        masked_loss(torch.rand(2, 4, 4), torch.ones(4, 4, 4))


@pytest.mark.parametrize("d", [0, 2, 5])
def test_gradient_matches_central_differences(d, rng):
    y = (rng.random((1, 3, 5, 5)) > 0.5).astype(np.float64)
    mask = (rng.random((1, 1, 5, 5)) > 0.2).astype(np.float64)
    lab = torch.from_numpy(np.concatenate([y, mask], axis=1))
    p0 = rng.uniform(0.05, 0.95, (1, 3, 5, 5))
    cfg = TanimotoConfig(d=d)

    pred = torch.tensor(p0, requires_grad=True)
    masked_loss(pred, lab, cfg).backward()
    analytic = pred.grad.numpy().ravel()

    h = 1e-6
    numeric = np.empty_like(analytic)
    for i in range(p0.size):
        up, dn = p0.copy().ravel(), p0.copy().ravel()
        up[i] += h
        dn[i] -= h
        f_up = masked_loss(torch.from_numpy(up.reshape(p0.shape)), lab, cfg).item()
        f_dn = masked_loss(torch.from_numpy(dn.reshape(p0.shape)), lab, cfg).item()
        numeric[i] = (f_up - f_dn) / (2 * h)
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert rel < 1e-4


def test_nan_predictions_propagate():
    lab = torch.ones(4, 4, 4)
    assert torch.isnan(masked_loss(torch.full((3, 4, 4), float("nan")), lab))
    assert np.isnan(tanimoto(np.ones(3), np.array([np.nan, 0.5, 0.5])))
