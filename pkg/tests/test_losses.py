import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mdcnn.imaging import ImageFormatError, SsimConfig, polyphase_split, ssim
from mdcnn.losses import (
    LossConfig,
    beta_for_qf,
    content_loss,
    distance_loss,
    gradient_difference_loss,
    mdgn_loss,
    mdrn_loss,
    mdvcn_loss,
    ssim_loss,
)

from oracles import gradient_difference_bruteforce, l1_mean


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


unit_8x8 = arrays(np.float64, (8, 8), elements=st.floats(0, 1))


def test_ssim_loss_values(rng):
    x = t(rng.random((12, 12)))
    assert float(ssim_loss(x, x)) == -1.0
    cfg = SsimConfig()
    assert float(ssim_loss(t(np.zeros((8, 8))), t(np.ones((8, 8))))) == pytest.approx(-cfg.c1 / (1 + cfg.c1))
    for _ in range(10):
        a, b = rng.random((12, 12)), rng.random((12, 12))
        assert float(ssim_loss(t(a), t(b))) == -ssim(a, b)


def test_distance_loss_values():
    assert float(distance_loss(t([[0.3, 0.4]]), t([[0.3, 0.4]]))) == 0.0
    assert float(distance_loss(t(np.zeros((3, 3))), t(np.ones((3, 3))))) == -1.0
    assert float(distance_loss(t([[0, 0.5]]), t([[0.25, 0.5]]))) == pytest.approx(-0.125, abs=1e-15)


def test_content_loss_values():
    assert float(content_loss(t([[0.3, 0.4]]), t([[0.3, 0.4]]))) == 0.0
    assert float(content_loss(t(np.zeros((3, 3))), t(np.ones((3, 3))))) == 1.0
    assert float(content_loss(t([[0, 0.5]]), t([[0.25, 0.5]]))) == pytest.approx(0.125, abs=1e-15)


def test_gradient_difference_values(rng):
    x = rng.random((6, 7))
    assert float(gradient_difference_loss(t(x), t(x))) == 0.0
    assert float(gradient_difference_loss(t(x), t(x + 0.25))) == pytest.approx(0.0, abs=1e-14)
    # 2x2 case: pixel (0,1) differs from its 3 neighbours and each of them from it
    two = t([[0.0, 1.0], [0.0, 0.0]])
    assert float(gradient_difference_loss(two, torch.zeros_like(two))) == pytest.approx(6 / 4)
    assert gradient_difference_bruteforce([[0, 1], [0, 0]], np.zeros((2, 2))) == 1.5


def test_gradient_difference_matches_bruteforce(rng):
    for shape in [(1, 1), (1, 5), (3, 3), (8, 8), (5, 9)]:
        x, y = rng.random(shape), rng.random(shape)
        assert float(gradient_difference_loss(t(x), t(y))) == pytest.approx(
            gradient_difference_bruteforce(x, y), rel=1e-12
        )


def test_batched_losses_average_over_batch(rng):
    x, y = rng.random((3, 1, 8, 8)), rng.random((3, 1, 8, 8))
    per = [gradient_difference_bruteforce(x[i, 0], y[i, 0]) for i in range(3)]
    assert float(gradient_difference_loss(t(x), t(y))) == pytest.approx(np.mean(per), rel=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ImageFormatError):
        content_loss(t(np.zeros((2, 2))), t(np.zeros((2, 3))))


@pytest.mark.parametrize(
    "qf,expected", [(2, 0.05), (6, 0.2 / 6), (10, 0.02), (20, 0.01), (40, 0.005), (100, 0.005)]
)
def test_beta_values(qf, expected):
    assert beta_for_qf(qf) == pytest.approx(expected, abs=1e-12)


def test_beta_rejects_bad_qf():
    with pytest.raises(ValueError):
        beta_for_qf(0)


def test_beta_monotone_and_bounded():
    cfg = LossConfig()
    values = [beta_for_qf(q) for q in range(1, 101)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(cfg.kappa1 <= v <= cfg.kappa2 for v in values)


def test_mdgn_loss_constant_image():
    img = t(np.full((16, 16), 0.4))
    a = polyphase_split(img).a
    loss = mdgn_loss(a, a.clone(), img, qf=10)
    assert float(loss.total) == pytest.approx(-2.0, abs=1e-12)
    assert float(loss.terms["distance"]) == 0.0


def test_mdgn_loss_terms_and_beta(rng):
    img = t(rng.random((16, 16)))
    a, b = t(rng.random((8, 8))), t(rng.random((8, 8)))
    loss = mdgn_loss(a, b, img, qf=10)
    assert float(loss.terms["distance"]) < 0
    assert float(loss.total) == pytest.approx(sum(float(v) for v in loss.terms.values()), rel=1e-9)
    totals = [float(mdgn_loss(a, b, img, qf=10, beta=beta).total) for beta in (0.0, 0.01, 0.05, 0.2)]
    assert all(x > y for x, y in zip(totals, totals[1:]))
    with pytest.raises(ImageFormatError):
        mdgn_loss(a, b, t(rng.random((12, 12))), qf=10)


def test_mdrn_loss_terms(rng):
    img = t(rng.random((8, 8)))
    assert float(mdrn_loss(img, img, img, img).total) == 0.0
    out = t(rng.random((8, 8)))
    single = mdrn_loss(img, out, img, img)
    assert float(single.total) == pytest.approx(float(content_loss(img, out) + gradient_difference_loss(img, out)))
    oa, ob, oc = (rng.random((8, 8)) for _ in range(3))
    full = mdrn_loss(img, t(oa), t(ob), t(oc))
    ref = sum(l1_mean(img.numpy(), o) + gradient_difference_bruteforce(img.numpy(), o) for o in (oa, ob, oc))
    assert float(full.total) == pytest.approx(ref, rel=1e-12)
    assert float(full.total) == pytest.approx(sum(float(v) for v in full.terms.values()), rel=1e-9)


def test_mdvcn_loss(rng):
    targets = [t(rng.random((8, 8))) for _ in range(3)]
    assert float(mdvcn_loss(targets, [x.clone() for x in targets]).total) == 0.0
    shifted = [targets[0] + 0.1, targets[1], targets[2]]
    loss = mdvcn_loss(targets, shifted)
    assert float(loss.terms["content_a"]) == pytest.approx(0.1)
    assert float(loss.terms["gd_a"]) == pytest.approx(0.0, abs=1e-14)
    virt = [t(rng.random((8, 8))) for _ in range(3)]
    ref = sum(l1_mean(a.numpy(), b.numpy()) + gradient_difference_bruteforce(a.numpy(), b.numpy())
              for a, b in zip(targets, virt))
    assert float(mdvcn_loss(targets, virt).total) == pytest.approx(ref, rel=1e-12)


def test_mdvcn_targets_receive_no_gradient(rng):
    target = t(rng.random((8, 8))).requires_grad_(True)
    virt = t(rng.random((8, 8))).requires_grad_(True)
    mdvcn_loss([target] * 3, [virt] * 3).total.backward()
    assert target.grad is None
    assert virt.grad is not None


def test_loss_value_as_dict_is_plain_floats(rng):
    img = t(rng.random((16, 16))).requires_grad_(True)
    d = mdgn_loss(polyphase_split(img).a, polyphase_split(img).b, img, 10).as_dict()
    assert set(d) == {"total", "ssim_a", "ssim_b", "distance"}
    assert all(isinstance(v, float) for v in d.values())


@settings(max_examples=40, deadline=None)
@given(unit_8x8, unit_8x8)
def test_loss_ranges(x, y):
    x, y = t(x), t(y)
    assert -1 - 1e-12 <= float(ssim_loss(x, y)) <= 1 + 1e-12
    assert -1 <= float(distance_loss(x, y)) <= 0
    assert 0 <= float(content_loss(x, y)) <= 1
    assert float(gradient_difference_loss(x, y)) >= 0
