import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsod.errors import InputError
from mfsod.imff import (
    IMFF,
    information_interactions,
    information_projection,
    imff_fuse,
    selection_weights,
    weighted_fusion,
)
from oracles import central_difference_grad, max_relative_error, naive_conv2d

torch.set_default_dtype(torch.float32)


def _module(c, kernel=1, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    m = IMFF(c, kernel).to(dtype)
    with torch.no_grad():
        for p in m.parameters():
            p.uniform_(-0.5, 0.5)
    return m


def test_projection_zero_params_gives_zero():
    m = IMFF(4, 3)
    nn.init.zeros_(m.project.weight)
    nn.init.zeros_(m.project.bias)
    out = information_projection(torch.randn(2, 4, 5, 5), m.project)
    assert torch.count_nonzero(out) == 0


@pytest.mark.parametrize("kernel", [1, 3])
def test_projection_matches_naive_convolution(kernel):
    m = _module(4, kernel)
    x = torch.randn(1, 4, 6, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    out = information_projection(x, m.project)
    assert out.shape == x.shape
    ref = naive_conv2d(x.numpy(), m.project.weight.detach().numpy(), m.project.bias.detach().numpy(), kernel // 2)
    np.testing.assert_allclose(out.detach().numpy(), ref, rtol=1e-6, atol=1e-12)


def test_projection_shared_between_modalities():
    m = _module(4, 3)
    f = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    assert torch.equal(information_projection(f, m.project), information_projection(f.clone(), m.project))
    assert len(list(m.project.parameters())) == 2  # one weight, one bias for both modalities


def test_projection_channel_mismatch():
    m = IMFF(4)
    with pytest.raises(InputError):
        information_projection(torch.randn(1, 5, 4, 4), m.project)


def test_interactions_identities():
    f = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    maps = information_interactions(f, f)
    assert torch.equal(maps.tot, 2 * f)
    assert torch.equal(maps.sh, f * f)
    assert torch.count_nonzero(maps.diff) == 0

    zero = torch.zeros_like(f)
    maps = information_interactions(f, zero)
    assert torch.equal(maps.tot, f)
    assert torch.count_nonzero(maps.sh) == 0
    assert torch.equal(maps.diff, f)


def test_interactions_elementwise_oracle():
    g = torch.Generator().manual_seed(5)
    a = torch.randn(1, 8, 4, 4, dtype=torch.float64, generator=g)
    b = torch.randn(1, 8, 4, 4, dtype=torch.float64, generator=g)
    maps = information_interactions(a, b)
    for c in range(8):
        for i in range(4):
            for j in range(4):
                x, y = a[0, c, i, j].item(), b[0, c, i, j].item()
                assert maps.tot[0, c, i, j].item() == x + y
                assert maps.sh[0, c, i, j].item() == x * y
                assert maps.diff[0, c, i, j].item() == x - y


def test_interactions_shape_mismatch():
    with pytest.raises(InputError):
        information_interactions(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_swap_flips_difference_only(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(1, 3, 2, 2, dtype=torch.float64, generator=g)
    b = torch.randn(1, 3, 2, 2, dtype=torch.float64, generator=g)
    ab, ba = information_interactions(a, b), information_interactions(b, a)
    assert torch.equal(ab.tot, ba.tot)
    assert torch.equal(ab.sh, ba.sh)
    assert torch.equal(ab.diff, -ba.diff)


def test_selection_weights_zero_selector_is_half():
    m = IMFF(4)
    nn.init.zeros_(m.select.weight)
    nn.init.zeros_(m.select.bias)
    f = torch.randn(2, 4, 3, 3)
    w_r, w_d = selection_weights(information_interactions(f, f * 2), m.select)
    assert w_r.shape == (2, 1, 3, 3)
    assert torch.all(w_r == 0.5) and torch.all(w_d == 0.5)


def test_selection_weights_match_naive_softmax_oracle():
    m = _module(3)
    g = torch.Generator().manual_seed(2)
    a = torch.randn(1, 3, 4, 4, dtype=torch.float64, generator=g)
    b = torch.randn(1, 3, 4, 4, dtype=torch.float64, generator=g)
    maps = information_interactions(a, b)
    w_r, w_d = selection_weights(maps, m.select)
    stacked = torch.cat([maps.tot, maps.sh, maps.diff], 1).numpy()
    logits = naive_conv2d(stacked, m.select.weight.detach().numpy(), m.select.bias.detach().numpy())
    for i in range(4):
        for j in range(4):
            zr, zd = logits[0, 0, i, j], logits[0, 1, i, j]
            er, ed = np.exp(zr), np.exp(zd)
            assert w_r[0, 0, i, j].item() == pytest.approx(er / (er + ed), rel=1e-6)
            assert w_d[0, 0, i, j].item() == pytest.approx(ed / (er + ed), rel=1e-6)
    np.testing.assert_allclose((w_r + w_d).detach().numpy(), 1.0, atol=1e-6)


def test_selection_weights_channel_mismatch():
    m = IMFF(4)
    f = torch.randn(1, 3, 2, 2)
    with pytest.raises(InputError):
        selection_weights(information_interactions(f, f), m.select)


def test_weighted_fusion_cases():
    g = torch.Generator().manual_seed(3)
    fr = torch.randn(1, 5, 3, 3, dtype=torch.float64, generator=g)
    fd = torch.randn(1, 5, 3, 3, dtype=torch.float64, generator=g)
    one, zero = torch.ones(1, 1, 3, 3, dtype=torch.float64), torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    assert torch.equal(weighted_fusion(fr, fd, one, zero), fr)

    w = torch.rand(1, 1, 3, 3, dtype=torch.float64, generator=g)
    torch.testing.assert_close(weighted_fusion(fr, fr, w, 1 - w), fr, rtol=0, atol=1e-15)

    out = weighted_fusion(fr, fd, w, 1 - w)
    for c in range(5):
        for i in range(3):
            for j in range(3):
                wr = w[0, 0, i, j].item()
                expected = wr * fr[0, c, i, j].item() + (1 - wr) * fd[0, c, i, j].item()
                assert out[0, c, i, j].item() == expected


def test_weighted_fusion_shape_errors():
    f = torch.zeros(1, 2, 3, 3)
    with pytest.raises(InputError):
        weighted_fusion(f, torch.zeros(1, 2, 3, 4), torch.zeros(1, 1, 3, 3), torch.zeros(1, 1, 3, 3))
    with pytest.raises(InputError):
        weighted_fusion(f, f, torch.zeros(1, 2, 3, 3), torch.zeros(1, 1, 3, 3))


def test_imff_composition_equals_manual_chain():
    m = _module(4, 3)
    g = torch.Generator().manual_seed(9)
    fr = torch.randn(2, 4, 5, 5, dtype=torch.float64, generator=g)
    fd = torch.randn(2, 4, 5, 5, dtype=torch.float64, generator=g)
    maps = information_interactions(information_projection(fr, m.project), information_projection(fd, m.project))
    w_r, w_d = selection_weights(maps, m.select)
    assert torch.equal(imff_fuse(fr, fd, m), weighted_fusion(fr, fd, w_r, w_d))


def test_imff_identical_inputs_pass_through():
    m = _module(4, 3)
    f = torch.randn(1, 4, 5, 5, dtype=torch.float64)
    torch.testing.assert_close(m(f, f), f, rtol=0, atol=1e-14)


@pytest.mark.parametrize("kernel", [1, 3])
def test_imff_gradient_matches_finite_differences(kernel):
    m = _module(4, kernel)
    g = torch.Generator().manual_seed(11)
    fr = torch.randn(1, 4, 4, 4, dtype=torch.float64, generator=g)
    fd = torch.randn(1, 4, 4, 4, dtype=torch.float64, generator=g)
    weights = torch.randn(1, 4, 4, 4, dtype=torch.float64, generator=g)

    def loss(x):
        return (m(x, fd) * weights).sum()

    x = fr.clone().requires_grad_(True)
    loss(x).backward()
    numeric = central_difference_grad(loss, fr)
    assert max_relative_error(x.grad, numeric) < 1e-4


def test_imff_parameter_layout():
    m = IMFF(232, 3)
    assert m.project.weight.shape == (232, 232, 3, 3)
    assert m.select.weight.shape == (2, 696, 1, 1)
    with pytest.raises(InputError):
        IMFF(8, 2)
