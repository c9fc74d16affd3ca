import numpy as np
import pytest
import torch

from voxwave.errors import GeometryError
from voxwave.lifting import (LearnedStep, StepChain, cdf53_chain, cdf97_chain,
                             cdf97_step_params, lift_forward, lift_inverse,
                             merge, split)

# Published CDF 9/7 analysis taps (unit-DC-gain convention); the lifting
# uses the unit-determinant normalization, i.e. these taps times sqrt(2)
# for the lowpass and divided by sqrt(2) for the highpass.
CDF97_LOW = np.array([
    0.026748757410810, -0.016864118442875, -0.078223266528990,
    0.266864118442875, 0.602949018236360, 0.266864118442875,
    -0.078223266528990, -0.016864118442875, 0.026748757410810,
])
CDF97_HIGH = np.array([
    0.091271763114250, -0.057543526228500, -0.591271763114250,
    1.115087052457000, -0.591271763114250, -0.057543526228500,
    0.091271763114250,
])
CDF53_LOW = np.array([-1 / 8, 2 / 8, 6 / 8, 2 / 8, -1 / 8])
CDF53_HIGH = np.array([-0.5, 1.0, -0.5])


def symmetric_filterbank(x, low_taps, high_taps, low_off, high_off):
    """Direct analysis: whole-sample symmetric extension, convolve, keep the
    lowpass at even and the highpass at odd positions."""
    n = len(x)
    ext = max(len(low_taps), len(high_taps))
    idx = np.arange(-ext, n + ext)
    idx = np.abs(idx)  # left mirror
    idx = np.where(idx >= n, 2 * (n - 1) - idx, idx)  # right mirror
    xe = x[idx]
    low = np.zeros(n // 2)
    high = np.zeros(n // 2)
    for m in range(n // 2):
        for k, c in enumerate(low_taps):
            low[m] += c * xe[ext + 2 * m + k + low_off]
        for k, c in enumerate(high_taps):
            high[m] += c * xe[ext + 2 * m + 1 + k + high_off]
    return low, high


def lift_1d(x, chain, integer=False):
    t = torch.from_numpy(np.asarray(x, dtype=np.float64)).reshape(-1, 1, 1)
    even, odd = split(t, 0)
    low, high = lift_forward(even, odd, chain, integer=integer)
    return low.numpy().ravel(), high.numpy().ravel()


def unlift_1d(low, high, chain, integer=False):
    lt = torch.from_numpy(np.asarray(low, dtype=np.float64)).reshape(-1, 1, 1)
    ht = torch.from_numpy(np.asarray(high, dtype=np.float64)).reshape(-1, 1, 1)
    even, odd = lift_inverse(lt, ht, chain, integer=integer)
    return merge(even, odd, 0).numpy().ravel()


def test_split_merge_index_parity():
    t = torch.tensor([0.0, 1.0, 2.0, 3.0]).reshape(4, 1, 1)
    even, odd = split(t, 0)
    assert even.ravel().tolist() == [0.0, 2.0]
    assert odd.ravel().tolist() == [1.0, 3.0]
    assert merge(even, odd, 0).ravel().tolist() == [0.0, 1.0, 2.0, 3.0]


def test_split_odd_length_rejected():
    with pytest.raises(GeometryError):
        split(torch.zeros(5, 2, 2), 0)


def test_split_merge_roundtrip_any_axis():
    rng = np.random.default_rng(0)
    t = torch.from_numpy(rng.standard_normal((4, 6, 8)))
    for axis in range(3):
        even, odd = split(t, axis)
        assert torch.equal(merge(even, odd, axis), t)


def test_cdf53_constant_signal_annihilated():
    low, high = lift_1d([7.0, 7.0, 7.0, 7.0], cdf53_chain())
    assert np.array_equal(high, [0.0, 0.0])
    assert np.array_equal(low, [7.0, 7.0])


def test_cdf53_ramp_matches_filterbank():
    x = np.array([2.0, 4.0, 6.0, 8.0])
    low, high = lift_1d(x, cdf53_chain())
    ref_low, ref_high = symmetric_filterbank(x, CDF53_LOW, CDF53_HIGH, -2, -1)
    assert np.abs(low - ref_low).max() < 1e-12
    assert np.abs(high - ref_high).max() < 1e-12


def test_cdf53_integer_matches_hand_oracle():
    # h[n] = x_o[n] - r(0.5 (x_e[n] + x_e[n+1]));  l[n] = x_e[n] + r(0.25 (h[n-1] + h[n]))
    # with r = round-half-away-from-zero and clamped edges:
    x = np.array([3.0, 7.0, 2.0, 5.0, 11.0, 0.0])
    xe, xo = x[0::2], x[1::2]

    def r(v):
        return np.sign(v) * np.floor(np.abs(v) + 0.5)

    h = xo - r(0.5 * (xe + np.append(xe[1:], xe[-1])))
    l = xe + r(0.25 * (np.concatenate(([h[0]], h[:-1])) + h))
    low, high = lift_1d(x, cdf53_chain(), integer=True)
    assert np.array_equal(high, h)
    assert np.array_equal(low, l)
    assert np.array_equal(unlift_1d(low, high, cdf53_chain(), integer=True), x)


def test_cdf97_params_documented_values():
    p = cdf97_step_params()
    assert p["alpha"] == pytest.approx(-1.586, abs=5e-4)
    assert p["beta"] == pytest.approx(-0.053, abs=5e-4)
    assert p["gamma"] == pytest.approx(0.883, abs=5e-4)
    assert p["delta"] == pytest.approx(0.444, abs=5e-4)
    assert abs(p["zeta"]) == pytest.approx(1.150, abs=5e-4)


def test_cdf97_polyphase_product_matches_filter_matrix():
    # multiply the lifting factor matrices (entries are Laurent polynomials)
    # and compare against the polyphase decomposition of the published taps
    p = cdf97_step_params()

    def pmul(a, b):
        out = {}
        for pa, ca in a.items():
            for pb, cb in b.items():
                out[pa + pb] = out.get(pa + pb, 0.0) + ca * cb
        return out

    def padd(a, b):
        out = dict(a)
        for k, c in b.items():
            out[k] = out.get(k, 0.0) + c
        return out

    def mmul(A, B):
        return [
            [padd(pmul(A[i][0], B[0][j]), pmul(A[i][1], B[1][j])) for j in range(2)]
            for i in range(2)
        ]

    one, zero = {0: 1.0}, {}
    predict1 = [[one, zero], [{0: p["alpha"], 1: p["alpha"]}, one]]
    update1 = [[one, {0: p["beta"], -1: p["beta"]}], [zero, one]]
    predict2 = [[one, zero], [{0: p["gamma"], 1: p["gamma"]}, one]]
    update2 = [[one, {0: p["delta"], -1: p["delta"]}], [zero, one]]
    scale = [[{0: p["zeta"]}, zero], [zero, {0: 1.0 / p["zeta"]}]]
    M = mmul(scale, mmul(update2, mmul(predict2, mmul(update1, predict1))))

    def poly_from_taps(taps, off, parity):
        out = {}
        for i, c in enumerate(taps):
            k = i + off
            if (k - parity) % 2 == 0:
                out[(k - parity) // 2] = c
        return out

    s2 = np.sqrt(2.0)
    ref = [
        [poly_from_taps(CDF97_LOW * s2, -4, 0), poly_from_taps(CDF97_LOW * s2, -4, 1)],
        [poly_from_taps(CDF97_HIGH / s2, -2, 0), poly_from_taps(CDF97_HIGH / s2, -2, 1)],
    ]
    for i in range(2):
        for j in range(2):
            keys = set(M[i][j]) | set(ref[i][j])
            err = max(abs(M[i][j].get(k, 0.0) - ref[i][j].get(k, 0.0)) for k in keys)
            assert err < 1e-3


def test_cdf97_lifting_matches_filterbank_oracle():
    rng = np.random.default_rng(1)
    s2 = np.sqrt(2.0)
    for trial in range(100):
        n = int(rng.integers(8, 65)) * 2
        x = rng.uniform(-100, 100, n)
        low, high = lift_1d(x, cdf97_chain())
        ref_low, ref_high = symmetric_filterbank(x, CDF97_LOW * s2, CDF97_HIGH / s2, -4, -3)
        assert np.abs(low - ref_low).max() < 1e-6
        assert np.abs(high - ref_high).max() < 1e-6


def test_cdf97_roundtrip_identity():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1000, 1000, 64)
    low, high = lift_1d(x, cdf97_chain())
    back = unlift_1d(low, high, cdf97_chain())
    assert np.abs(back - x).max() < 1e-9


def _forced_unit_gains(step):
    class Ones(torch.nn.Module):
        def forward(self, x):
            return torch.ones_like(x)

    step.affine_a = Ones()
    step.affine_b = Ones()
    return step


def test_unit_affine_equals_additive():
    torch.manual_seed(0)
    affine_step = LearnedStep(width=4, affine="fine")
    additive_step = LearnedStep(width=4, affine=None)
    additive_step.predict_net = affine_step.predict_net
    additive_step.update_net = affine_step.update_net
    _forced_unit_gains(affine_step)
    rng = np.random.default_rng(3)
    x = torch.from_numpy(rng.uniform(0, 255, (8, 4, 4)))
    with torch.no_grad():
        even, odd = split(x, 0)
        la, ha = lift_forward(even, odd, StepChain([affine_step]))
        ln, hn = lift_forward(even, odd, StepChain([additive_step]))
    assert torch.equal(la, ln) and torch.equal(ha, hn)


def test_learned_integer_lifting_is_bit_exact():
    from conftest import randomize_module

    torch.manual_seed(1)
    chain = StepChain([LearnedStep(width=8, affine="fine"), LearnedStep(width=8, affine="fine")])
    for step in chain.steps:
        randomize_module(step, seed=11)
    rng = np.random.default_rng(4)
    x = torch.from_numpy(rng.integers(0, 256, (16, 6, 6)).astype(np.float64))
    with torch.no_grad():
        even, odd = split(x, 0)
        low, high = lift_forward(even, odd, chain, integer=True)
        assert np.array_equal(low.numpy(), np.round(low.numpy()))
        e2, o2 = lift_inverse(low, high, chain, integer=True)
        assert torch.equal(merge(e2, o2, 0), x)


def test_learned_float_roundtrip_error_bound():
    from conftest import randomize_module

    torch.manual_seed(2)
    chain = StepChain([LearnedStep(width=8, affine="fine").double(),
                       LearnedStep(width=8, affine="fine").double()])
    for i, step in enumerate(chain.steps):
        randomize_module(step, seed=20 + i)
    rng = np.random.default_rng(5)
    worst = 0.0
    with torch.no_grad():
        for _ in range(20):
            x = torch.from_numpy(rng.uniform(0, 65535, (8, 6, 6)))
            even, odd = split(x, 0)
            low, high = lift_forward(even, odd, chain)
            e2, o2 = lift_inverse(low, high, chain)
            back = merge(e2, o2, 0)
            worst = max(worst, float((back - x).abs().max()))
    assert worst < 1e-3
