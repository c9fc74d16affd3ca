import numpy as np
import pytest
import torch

from voxwave.errors import GeometryError
from voxwave.transform import (SubbandSet, TransformModel, band_dims, band_order,
                               fixed_chains, forward_3d, inverse_3d,
                               lift_axis_forward, parameter_count)


def gaussian_blob(n=32):
    ax = np.arange(n) - (n - 1) / 2
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.exp(-(z ** 2 + y ** 2 + x ** 2) / (2 * (n / 6) ** 2)) * 1000.0


def test_single_level_eight_bands():
    v = torch.from_numpy(np.random.default_rng(0).standard_normal((8, 8, 8)))
    s = forward_3d(v, 1, fixed_chains("cdf53"))
    assert len(s.bands) == 8
    assert all(tuple(t.shape) == (4, 4, 4) for t in s.bands.values())


@pytest.mark.parametrize("levels", [1, 2, 3, 4])
def test_band_count_dims_and_critical_sampling(levels):
    n = 1 << (levels + 1)
    v = torch.from_numpy(np.random.default_rng(levels).standard_normal((n, n, n)))
    s = forward_3d(v, levels, fixed_chains("cdf53"))
    assert len(s.bands) == 7 * levels + 1
    for (level, label), band in s.bands.items():
        assert tuple(band.shape) == band_dims((n, n, n), level)
    assert s.total_samples() == n ** 3


def test_three_levels_is_22_bands():
    v = torch.zeros(16, 16, 16, dtype=torch.float64)
    s = forward_3d(v, 3, fixed_chains("cdf53"))
    assert len(s.bands) == 22


def test_indivisible_dims_rejected():
    with pytest.raises(GeometryError):
        forward_3d(torch.zeros(10, 8, 8, dtype=torch.float64), 2, fixed_chains("cdf53"))


def test_serialization_order():
    order = band_order(2)
    assert order[0] == (2, "LLL")
    assert order[1:8] == [(2, lab) for lab in
                          ("HLL", "LHL", "HHL", "LLH", "HLH", "LHH", "HHH")]
    assert order[8:] == [(1, lab) for lab in
                         ("HLL", "LHL", "HHL", "LLH", "HLH", "LHH", "HHH")]


def test_lossless_roundtrip_learned_all_sharing_modes():
    rng = np.random.default_rng(1)
    from conftest import randomize_module

    for sharing in ("share_all", "share_xy", "share_xz", "share_yz", "share_none"):
        torch.manual_seed(7)
        model = TransformModel(sharing, "fine", width=8)
        randomize_module(model, seed=70)
        v = torch.from_numpy(rng.integers(0, 65536, (16, 16, 16)).astype(np.float64))
        with torch.no_grad():
            s = forward_3d(v, 2, model.chains(), integer=True)
            back = inverse_3d(s, model.chains(), integer=True)
        assert torch.equal(back, v), sharing


def test_lossless_roundtrip_cdf53():
    rng = np.random.default_rng(2)
    v = torch.from_numpy(rng.integers(-1000, 1000, (16, 16, 16)).astype(np.float64))
    s = forward_3d(v, 3, fixed_chains("cdf53"), integer=True)
    back = inverse_3d(s, fixed_chains("cdf53"), integer=True)
    assert torch.equal(back, v)


def test_float_roundtrip_error_bound():
    from conftest import randomize_module

    torch.manual_seed(8)
    model = TransformModel("share_xy", "fine", width=8).double()
    randomize_module(model, seed=80)
    rng = np.random.default_rng(3)
    v = torch.from_numpy(rng.uniform(0, 65535, (16, 16, 16)))
    with torch.no_grad():
        s = forward_3d(v, 2, model.chains())
        back = inverse_3d(s, model.chains())
    assert float((back - v).abs().max()) < 1e-3


def test_zeroing_a_band_changes_output():
    rng = np.random.default_rng(4)
    v = torch.from_numpy(rng.standard_normal((8, 8, 8)))
    s = forward_3d(v, 1, fixed_chains("cdf97"))
    s.bands[(1, "HHH")] = torch.zeros_like(s.bands[(1, "HHH")])
    back = inverse_3d(s, fixed_chains("cdf97"))
    assert not torch.allclose(back, v)


def test_cdf97_energy_concentrates_in_lowpass():
    v = torch.from_numpy(gaussian_blob(32))
    s = forward_3d(v, 1, fixed_chains("cdf97"))
    energies = {k: float((t ** 2).sum()) for k, t in s.bands.items()}
    total = sum(energies.values())
    assert energies[(1, "LLL")] / total >= 0.90


def test_parameter_count_sharing_ratios():
    full = parameter_count("share_none", "fine", width=8)
    assert parameter_count("share_all", "fine", width=8) * 3 == full
    two = parameter_count("share_xy", "fine", width=8)
    assert parameter_count("share_xz", "fine", width=8) == two
    assert parameter_count("share_yz", "fine", width=8) == two
    assert two == full * 2 // 3


def test_parameter_count_coarse_matches_layer_arithmetic():
    # per conv net: (1->w) + (w->w) + (w->1) 3x3x3 convs with biases
    w = 16
    net = (w * 1 * 27 + w) + (w * w * 27 + w) + (1 * w * 27 + 1)
    fine_step = 4 * net            # predict, update, two gain nets
    coarse_step = 2 * net + 2      # gain nets collapse to one scalar each
    assert parameter_count("share_all", "fine", width=w) == 2 * fine_step
    assert parameter_count("share_all", "coarse", width=w) == 2 * coarse_step
    assert parameter_count("share_all", "none", width=w) == 2 * 2 * net


def test_cross_level_sharing_same_operator():
    # the level-2 pass over LLL uses the very same modules as level 1
    from conftest import randomize_module

    torch.manual_seed(9)
    model = TransformModel("share_all", "none", width=4)
    randomize_module(model, seed=90)
    rng = np.random.default_rng(5)
    v = torch.from_numpy(rng.integers(0, 256, (8, 8, 8)).astype(np.float64))
    with torch.no_grad():
        s2 = forward_3d(v, 2, model.chains(), integer=True)
        s1 = forward_3d(v, 1, model.chains(), integer=True)
        inner = forward_3d(s1.bands[(1, "LLL")], 1, model.chains(), integer=True)
    for lab in ("HLL", "LHL", "HHL", "LLH", "HLH", "LHH", "HHH", "LLL"):
        assert torch.equal(s2.bands[(2, lab)], inner.bands[(1, lab)])


def test_shared_axis_operator_equality_under_cyclic_roll():
    # with full sharing, the per-axis operators are one operator applied in
    # rolled orientations: lifting y on v == roll-back(lifting z on roll(v))
    from conftest import randomize_module

    torch.manual_seed(10)
    model = TransformModel("share_all", "fine", width=4).double()
    randomize_module(model, seed=100)
    chain = model.chain_for_axis(0)
    rng = np.random.default_rng(6)
    v = torch.from_numpy(rng.standard_normal((8, 8, 8)))
    with torch.no_grad():
        low_y, high_y = lift_axis_forward(v, 1, model.chain_for_axis(1), False)
        rolled = v.permute(1, 2, 0).contiguous()
        low_z, high_z = lift_axis_forward(rolled, 0, chain, False)
    assert torch.equal(low_y, low_z.permute(2, 0, 1))
    assert torch.equal(high_y, high_z.permute(2, 0, 1))
