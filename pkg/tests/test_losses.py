import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ptvton.losses import (BatchOutputs, LossWeights, NonFiniteLossError, combined_l1_loss,
                           gan_loss, generator_adversarial, total_objective)
from ptvton.texture import WarpLossTerms, warp_loss

from .oracles import fd_max_rel_error


def const(v, shape=(2, 3, 8, 6)):
    return torch.full(shape, float(v), dtype=torch.float64)


def test_gan_loss_half_probabilities():
    p = torch.full((4,), 0.5, dtype=torch.float64)
    assert abs(gan_loss(p, p, p, p, 0.5).item() - math.log(0.25)) <= 1e-12


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.01, 0.99),
       st.floats(0.01, 0.99), st.floats(0.0, 1.0))
def test_gan_loss_hand_formula(ar, sr, af, sf, rho):
    t = lambda v: torch.tensor([v], dtype=torch.float64)
    want = (rho * math.log(ar) + (1 - rho) * math.log(sr)
            + rho * math.log(1 - af) + (1 - rho) * math.log(1 - sf))
    assert gan_loss(t(ar), t(sr), t(af), t(sf), rho).item() == pytest.approx(want, abs=1e-12)


def test_gan_loss_clamps_extremes():
    one, zero = torch.ones(3), torch.zeros(3)
    assert torch.isfinite(gan_loss(zero, zero, one, one))
    assert torch.isfinite(generator_adversarial(zero, zero))


def test_generator_adversarial_is_non_saturating():
    p = torch.tensor([0.25], dtype=torch.float64)
    assert generator_adversarial(p, p, 0.3).item() == pytest.approx(-math.log(0.25))


def test_l1_identity_and_constant_offset():
    w = LossWeights()
    x = torch.rand(2, 3, 8, 6, dtype=torch.float64)
    assert combined_l1_loss(x, x, w).item() == 0.0
    assert combined_l1_loss(const(0.3), const(0.5), w).item() == pytest.approx(0.2, abs=1e-12)


def test_l1_shape_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        combined_l1_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), LossWeights())


def test_perceptual_term_needs_extractor():
    w = LossWeights(perceptual_weight=1.0)
    with pytest.raises(ValueError):
        combined_l1_loss(const(0), const(1), w)
    feats = lambda x: 2 * x
    assert combined_l1_loss(const(0), const(1), w, feats).item() == pytest.approx(3.0)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(rho=1.5)
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)
    with pytest.raises(ValueError):
        LossWeights(l1_weight=-1)


def test_warp_loss_constant_images():
    gt = const(0.5)
    terms = WarpLossTerms(gt, gt + 0.1, gt - 0.3, (1.0, 1.0, 0.0))
    assert abs(warp_loss(terms).item() - 0.4) <= 1e-12


def test_warp_loss_validation():
    gt = const(0.5)
    with pytest.raises(ValueError):
        warp_loss(WarpLossTerms(gt, gt, gt, (1.0, -1.0, 0.0)))
    with pytest.raises(ValueError):
        warp_loss(WarpLossTerms(gt, gt, gt, (1.0, 1.0, 1.0)))
    with pytest.raises(ValueError, match="dimension mismatch"):
        warp_loss(WarpLossTerms(gt, const(0, (1, 3, 8, 6)), gt))


def _outputs(gen, tgt, d):
    return BatchOutputs(gen, tgt, d[0], d[1], d[2], d[3])


def test_alpha_zero_is_pure_reconstruction():
    gen, tgt = const(0.2), const(0.7)
    d = [torch.full((2,), 0.3, dtype=torch.float64)] * 4
    g, _ = total_objective(_outputs(gen, tgt, d), LossWeights(alpha=0.0))
    assert g.item() == combined_l1_loss(gen, tgt, LossWeights()).item()


def test_total_objective_composition():
    gen, tgt = const(0.2), const(0.7)
    d = [torch.full((2,), v, dtype=torch.float64) for v in (0.8, 0.7, 0.4, 0.3)]
    w = LossWeights(alpha=0.5, rho=0.25)
    g, dl = total_objective(_outputs(gen, tgt, d), w)
    assert g.item() == pytest.approx(0.5 * -(0.25 * math.log(0.4) + 0.75 * math.log(0.3)) + 0.5)
    assert dl.item() == pytest.approx(-gan_loss(*d, 0.25).item())


def test_non_finite_raises():
    gen = const(0.2)
    gen[0, 0, 0, 0] = float("nan")
    d = [torch.full((2,), 0.5, dtype=torch.float64)] * 4
    with pytest.raises(NonFiniteLossError):
        total_objective(_outputs(gen, const(0.1), d), LossWeights())


# Gradient checks: central differences in float64 on small parameter vectors.

def test_gradcheck_gan_loss():
    theta = torch.rand(20, dtype=torch.float64) * 0.8 + 0.1
    assert fd_max_rel_error(lambda t: gan_loss(t[:5], t[5:10], t[10:15], t[15:], 0.3), theta) < 1e-4


def test_gradcheck_combined_l1():
    torch.manual_seed(0)
    target = torch.rand(1, 3, 6, 6, dtype=torch.float64)
    # Offsets keep every residual well away from the kink at zero.
    theta = target + torch.where(torch.rand_like(target) > 0.5, 1.0, -1.0) * (0.05 + 0.2 * torch.rand_like(target))
    assert fd_max_rel_error(lambda t: combined_l1_loss(t, target, LossWeights()), theta) < 1e-4


def test_gradcheck_warp_loss():
    torch.manual_seed(1)
    gt = torch.rand(1, 3, 5, 6, dtype=torch.float64)
    s1 = gt + 0.3
    theta = gt - 0.1 - 0.2 * torch.rand_like(gt)
    fn = lambda t: warp_loss(WarpLossTerms(gt, t, s1 * t, (1.0, 0.7, 0.0)))
    assert fd_max_rel_error(fn, theta) < 1e-4


def test_gradcheck_total_objective():
    torch.manual_seed(2)
    target = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    wa = torch.randn(48, dtype=torch.float64) * 0.2
    ws = torch.randn(48, dtype=torch.float64) * 0.2
    real_a = torch.tensor([0.7], dtype=torch.float64)
    real_s = torch.tensor([0.6], dtype=torch.float64)
    theta = target + torch.where(torch.rand_like(target) > 0.5, 1.0, -1.0) * (0.05 + 0.2 * torch.rand_like(target))

    def fn(t):
        flat = t.reshape(-1)
        out = BatchOutputs(t, target, real_a, real_s,
                           torch.sigmoid(flat @ wa).reshape(1), torch.sigmoid(flat @ ws).reshape(1))
        g, d = total_objective(out, LossWeights(alpha=0.5, rho=0.4))
        return g + 0.5 * d

    assert fd_max_rel_error(fn, theta) < 1e-4
