import numpy as np
import pytest
import torch

from voxwave.bitstream import Bitstream, BitstreamHeader
from voxwave.codec import (CodecConfig, CodecModel, build_model, decode_volume,
                           encode_volume, load_model, metrics, save_model)
from voxwave.errors import DecodeError
from voxwave.volume import Volume


def small_config(**kw):
    base = dict(levels=2, width=8, sharing="share_xy", granularity="fine",
                transform_kind="learned", entropy="factorized",
                lossless=True, block=(16, 16, 16))
    base.update(kw)
    return CodecConfig(**base)


def rand_model(config, seed):
    from conftest import randomize_module

    model = build_model(config, seed=seed)
    if model.transform is not None:
        randomize_module(model.transform, seed=seed + 1000)
    return model


def rand_volume(rng, dims=(16, 16, 16), bit_depth=8):
    hi = 2 ** bit_depth
    return Volume(rng.integers(0, hi, dims).astype(np.float64), bit_depth=bit_depth)


def test_header_roundtrip_byte_exact():
    hdr = BitstreamHeader(levels=3, steps=2, width=16, sharing="share_yz",
                          granularity="coarse", transform_kind="cdf97",
                          entropy="context", lossless=False, bit_depth=16,
                          signed=True, dims=(70, 50, 34), block_dims=(72, 56, 40),
                          qs=0.125, model_hash=0xDEADBEEF,
                          norm_scale=(-12.5, 99.0))
    packed = hdr.pack()
    back, size = BitstreamHeader.unpack(packed)
    assert size == len(packed)
    assert back == hdr
    assert back.pack() == packed


def test_lossless_roundtrip_bit_exact_8bit():
    rng = np.random.default_rng(0)
    model = rand_model(small_config(), seed=1)
    vol = rand_volume(rng)
    data = encode_volume(vol, model)
    out = decode_volume(data, model)
    assert np.array_equal(out.data, vol.data)
    assert out.bit_depth == 8


def test_lossless_roundtrip_bit_exact_16bit_multiblock():
    rng = np.random.default_rng(1)
    model = rand_model(small_config(), seed=2)
    vol = rand_volume(rng, dims=(20, 17, 30), bit_depth=16)
    data = encode_volume(vol, model)
    out = decode_volume(data, model)
    assert np.array_equal(out.data, vol.data)


@pytest.mark.parametrize("sharing", ["share_all", "share_none", "share_yz"])
def test_lossless_roundtrip_sharing_modes(sharing):
    rng = np.random.default_rng(2)
    model = rand_model(small_config(sharing=sharing), seed=3)
    vol = rand_volume(rng, dims=(16, 16, 16), bit_depth=16)
    data = encode_volume(vol, model)
    assert np.array_equal(decode_volume(data, model).data, vol.data)


def test_lossless_roundtrip_fixed_cdf53():
    rng = np.random.default_rng(3)
    model = build_model(small_config(transform_kind="cdf53"), seed=4)
    vol = rand_volume(rng, bit_depth=16)
    data = encode_volume(vol, model)
    assert np.array_equal(decode_volume(data, model).data, vol.data)


def test_encode_is_deterministic():
    rng = np.random.default_rng(4)
    model = build_model(small_config(), seed=5)
    vol = rand_volume(rng)
    assert encode_volume(vol, model) == encode_volume(vol, model)


def test_jobs_do_not_change_stream():
    rng = np.random.default_rng(5)
    model = build_model(small_config(), seed=6)
    vol = rand_volume(rng, dims=(32, 16, 16))
    assert encode_volume(vol, model, jobs=1) == encode_volume(vol, model, jobs=4)
    data = encode_volume(vol, model)
    assert np.array_equal(decode_volume(data, model, jobs=4).data, vol.data)


def test_all_zero_volume_lossless_bpp():
    model = build_model(small_config(transform_kind="cdf53", levels=3,
                                     block=(64, 64, 64)), seed=7)
    vol = Volume(np.zeros((64, 64, 64)), bit_depth=8)
    data = encode_volume(vol, model)
    _, bpp = metrics(vol, decode_volume(data, model), len(data))
    assert bpp < 0.1


def test_near_transparent_quantization():
    rng = np.random.default_rng(6)
    model = build_model(small_config(lossless=False, qs=1e-6,
                                     transform_kind="cdf97"), seed=8)
    vol = rand_volume(rng, dims=(16, 16, 16), bit_depth=8)
    data = encode_volume(vol, model)
    out = decode_volume(data, model)
    psnr, _ = metrics(vol, out, len(data))
    assert psnr > 80.0


def test_lossy_psnr_monotone_in_qs():
    rng = np.random.default_rng(7)
    vol = rand_volume(rng, dims=(16, 16, 16), bit_depth=8)
    psnrs, bpps = [], []
    for qs in (1.0, 4.0, 16.0, 64.0, 128.0):
        model = build_model(small_config(lossless=False, qs=qs,
                                         transform_kind="cdf97"), seed=9)
        data = encode_volume(vol, model)
        psnr, bpp = metrics(vol, decode_volume(data, model), len(data))
        psnrs.append(psnr)
        bpps.append(bpp)
    assert all(a >= b for a, b in zip(psnrs, psnrs[1:]))
    assert all(a >= b for a, b in zip(bpps, bpps[1:]))


def test_zeroed_post_processing_is_identity():
    rng = np.random.default_rng(8)
    model = build_model(small_config(lossless=False, qs=4.0,
                                     transform_kind="cdf97"), seed=10)
    vol = rand_volume(rng, bit_depth=8)
    x = torch.from_numpy(rng.uniform(0, 255, (8, 8, 8)))
    with torch.no_grad():
        assert torch.equal(model.post(x.float()), x.float())


def test_decode_rejects_wrong_model():
    rng = np.random.default_rng(9)
    m1 = build_model(small_config(), seed=11)
    m2 = build_model(small_config(), seed=12)
    data = encode_volume(rand_volume(rng), m1)
    with pytest.raises(DecodeError):
        decode_volume(data, m2)


def test_decode_rejects_corruption_and_truncation():
    rng = np.random.default_rng(10)
    model = build_model(small_config(), seed=13)
    data = bytearray(encode_volume(rand_volume(rng), model))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(DecodeError):
        decode_volume(bytes(data), model)
    with pytest.raises(DecodeError):
        decode_volume(bytes(data[:-10]), model)


def test_model_save_load_and_hash(tmp_path):
    rng = np.random.default_rng(11)
    model = build_model(small_config(), seed=14)
    p = tmp_path / "m.vxwm"
    save_model(model, p)
    back = load_model(p)
    assert back.hash() == model.hash()
    assert back.config == model.config
    vol = rand_volume(rng)
    assert encode_volume(vol, back) == encode_volume(vol, model)


def test_metrics_examples():
    x = Volume(np.zeros((4, 4, 4)), bit_depth=8)
    assert metrics(x, x, 0)[0] == float("inf")
    noisy = Volume(x.data.copy(), bit_depth=8)
    noisy.data[0, 0, 0] = 8.0  # mse = 64/64 = 1
    psnr, _ = metrics(x, noisy, 0)
    assert psnr == pytest.approx(10 * np.log10(255 ** 2), abs=0.01)
    big = Volume(np.zeros((64, 64, 64)), bit_depth=8)
    assert metrics(big, big, 32768)[1] == pytest.approx(1.0)


def test_normalization_path_32bit():
    rng = np.random.default_rng(12)
    data = rng.uniform(-1e6, 1e6, (16, 16, 16))
    vol = Volume(data, bit_depth=32, signed=True)
    model = build_model(small_config(transform_kind="cdf53"), seed=15)
    stream = encode_volume(vol, model)
    out = decode_volume(stream, model)
    assert out.bit_depth == 16
    assert out.provenance_scale is not None
    from voxwave.volume import denormalize

    back = denormalize(out, 32, True)
    lo, hi = out.provenance_scale
    assert np.abs(back.data - data).max() <= 0.5 * (hi - lo) / 65535 + 1e-6


def test_context_entropy_lossless_roundtrip():
    rng = np.random.default_rng(13)
    model = build_model(small_config(entropy="context", levels=2,
                                     block=(8, 8, 8)), seed=16)
    vol = rand_volume(rng, dims=(8, 8, 8), bit_depth=8)
    data = encode_volume(vol, model)
    out = decode_volume(data, model)
    assert np.array_equal(out.data, vol.data)


def test_context_entropy_lossy_roundtrip():
    rng = np.random.default_rng(14)
    model = build_model(small_config(entropy="context", levels=1, lossless=False,
                                     qs=2.0, transform_kind="cdf97",
                                     block=(8, 8, 8)), seed=17)
    vol = rand_volume(rng, dims=(8, 8, 8), bit_depth=8)
    data = encode_volume(vol, model)
    out = decode_volume(data, model)
    psnr, _ = metrics(vol, out, len(data))
    assert psnr > 30.0
