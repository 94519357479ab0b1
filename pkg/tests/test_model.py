import numpy as np
import pytest

from cfcrn.engine import ShapeError, Tensor, backward, mse_loss
from cfcrn.gradcheck import end_to_end_check
from cfcrn.model import (AUX_GROUPS, KERNEL_COUNTS, MAIN_GROUPS, build_params, cfcrn_forward,
                         fcrn_forward)


@pytest.fixture(scope="module")
def cparams():
    return build_params("cfcrn", 0)


def test_full_size_shapes(cparams):
    x = Tensor(np.random.default_rng(0).random((1, 3, 128, 128)))
    out = cfcrn_forward(x, cparams, with_aux=True)
    assert out.density.shape == (1, 1, 128, 128)
    assert [a.shape for a in out.aux_maps] == [(1, 1, 16, 16), (1, 1, 32, 32), (1, 1, 64, 64)]
    assert [t.shape[1:] for t in out.taps] == [(512, 16, 16), (128, 32, 32), (64, 64, 64)]
    assert out.density.data.min() >= 0 and all(a.data.min() >= 0 for a in out.aux_maps)


def test_fully_convolutional(cparams):
    x = Tensor(np.random.default_rng(1).random((1, 3, 256, 256)))
    assert cfcrn_forward(x, cparams, with_aux=False).density.shape == (1, 1, 256, 256)
    x2 = Tensor(np.random.default_rng(1).random((2, 3, 24, 40)))
    out = cfcrn_forward(x2, cparams)
    assert out.density.shape == (2, 1, 24, 40)
    assert [a.shape[2:] for a in out.aux_maps] == [(3, 5), (6, 10), (12, 20)]


def test_indivisible_input_rejected(cparams):
    with pytest.raises(ShapeError):
        cfcrn_forward(Tensor(np.zeros((1, 3, 20, 16))), cparams)


def test_fcrn_shape_and_fewer_params():
    fp = build_params("fcrn", 0)
    x = Tensor(np.random.default_rng(2).random((1, 3, 128, 128)))
    y = fcrn_forward(x, fp)
    assert y.shape == (1, 1, 128, 128) and y.data.min() >= 0
    cp = build_params("cfcrn", 0, aux=False)
    # oracle: hand count of weights and biases per block
    def count(c_in):
        k = [3] * 7 + [1]
        return sum(co * ci * kk * kk + co for co, ci, kk in zip(KERNEL_COUNTS, c_in, k))
    fc = count([3, 32, 64, 128, 512, 128, 64, 32])
    cc = count([3, 32, 64, 128, 640, 192, 96, 32])
    assert fp.num_parameters() == fc
    assert cp.num_parameters() == cc
    assert fc < cc


def test_kernel_counts_and_shapes(cparams):
    outs = [cparams[f"block{i}.w"].shape[0] for i in range(1, 9)]
    assert tuple(outs) == KERNEL_COUNTS
    assert cparams["block8.w"].shape == (1, 32, 1, 1)
    assert cparams["aux1.conv1.w"].shape == (32, 512, 3, 3)
    assert cparams["aux2.conv1.w"].shape == (32, 128, 3, 3)
    assert cparams["aux3.conv1.w"].shape == (32, 64, 3, 3)
    assert cparams["aux1.conv2.w"].shape == (1, 32, 1, 1)


def test_partition_is_exhaustive_and_disjoint(cparams):
    names = [p.name for g in MAIN_GROUPS + AUX_GROUPS for p in cparams.group(g)]
    assert len(names) == len(set(names)) == len(cparams)
    assert {p.name for p in cparams.group("theta2")} == {"block5.w", "block5.b"}
    assert {p.name for p in cparams.group("theta4")} == {"block7.w", "block7.b", "block8.w", "block8.b"}


def test_init_deterministic_and_zero_bias():
    a, b = build_params("cfcrn", 5), build_params("cfcrn", 5)
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a.state_dict())
    assert all(not p.data.any() for p in a if p.name.endswith(".b"))
    assert all(not p.momentum.any() for p in a)


def test_aux_variant_shares_main_init():
    with_aux = build_params("cfcrn", 9, aux=True)
    without = build_params("cfcrn", 9, aux=False)
    assert not without.has_aux
    for p in without:
        assert with_aux[p.name].data.tobytes() == p.data.tobytes()


def test_aux_does_not_perturb_density(cparams):
    x = Tensor(np.random.default_rng(3).random((1, 3, 32, 32)))
    a = cfcrn_forward(x, cparams, with_aux=True).density.data
    b = cfcrn_forward(x, cparams, with_aux=False).density.data
    assert a.tobytes() == b.tobytes()


def test_zero_input_zero_density(cparams):
    out = cfcrn_forward(Tensor(np.zeros((1, 3, 16, 16))), cparams, with_aux=True)
    assert not out.density.data.any()
    assert not any(a.data.any() for a in out.aux_maps)


def test_width_multiplier():
    p = build_params("cfcrn", 0, width=0.25)
    assert p["block4.w"].shape == (128, 32, 3, 3)
    assert p["aux1.conv1.w"].shape == (8, 128, 3, 3)
    out = cfcrn_forward(Tensor(np.ones((1, 3, 16, 16))), p)
    assert out.density.shape == (1, 1, 16, 16)


def test_fcrn_rejects_aux():
    with pytest.raises(ValueError):
        build_params("fcrn", 0, aux=True)


def test_gradient_reaches_every_main_group(cparams):
    cparams.zero_grad()
    x = Tensor(np.random.default_rng(4).random((1, 3, 16, 16)))
    out = cfcrn_forward(x, cparams, with_aux=False)
    backward(mse_loss(out.density, np.full((1, 1, 16, 16), 5.0)))
    for g in MAIN_GROUPS:
        assert any(p.grad is not None and p.grad.any() for p in cparams.group(g)), g
    assert all(p.grad is None for p in cparams.aux_params())
    cparams.zero_grad()


def test_end_to_end_gradient_check():
    for res in end_to_end_check(seed=1, per_group=6):
        assert res.ok, res.line()
