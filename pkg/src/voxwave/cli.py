"""Command-line front end: encode, decode, train, eval, rd-curve, verify.

Exit codes: 0 success, 1 usage/config, 2 I/O or malformed files, 3 decode
integrity failures, 4 training divergence.  VOXWAVE_SEED overrides --seed.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .codec import (CodecConfig, build_model, decode_volume, encode_volume,
                    load_model, metrics, save_model)
from .data import make_corpus
from .errors import (ConfigError, DecodeError, FormatError, GeometryError,
                     TrainingDivergedError, UsageError, VoxwaveError)
from .train import TrainConfig, train, write_log_csv
from .volume import Volume, load_raw, read_volume, write_volume

LAMBDA_CHOICES = (1.0, 4.0, 16.0, 64.0, 128.0)


def _add_model_flags(p):
    p.add_argument("--model", help="model weight file; omit to build from flags")
    p.add_argument("--levels", type=int, default=3, help="decomposition levels")
    p.add_argument("--sharing", default="share_xy",
                   choices=("share_all", "share_xy", "share_xz", "share_yz", "share_none"))
    p.add_argument("--granularity", default="fine", choices=("fine", "coarse", "none"))
    p.add_argument("--transform", default="learned", choices=("learned", "cdf53", "cdf97"))
    p.add_argument("--entropy", default="factorized", choices=("factorized", "context"))
    p.add_argument("--width", type=int, default=16, help="conv channel width")
    p.add_argument("--block", type=int, default=64, help="cubic block edge")
    p.add_argument("--lossless", action="store_true")
    p.add_argument("--qs", type=float, default=1.0, help="quantization step")
    p.add_argument("--seed", type=int, default=0)


def _add_input_flags(p):
    p.add_argument("--input", required=True, help="volume file (VXW0 or raw)")
    p.add_argument("--dims", help="D,H,W for raw input")
    p.add_argument("--bit-depth", type=int, default=8, help="raw input bit depth")
    p.add_argument("--signed", action="store_true", help="raw input is signed")
    p.add_argument("--normalize", action="store_true",
                   help="force 16-bit min-max normalization")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxwave",
                                 description="volumetric codec with a trained "
                                             "affine wavelet-like transform")
    sub = ap.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="compress a volume")
    _add_input_flags(enc)
    _add_model_flags(enc)
    enc.add_argument("--output", required=True)
    enc.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    dec = sub.add_parser("decode", help="decompress a bitstream")
    dec.add_argument("--input", required=True)
    dec.add_argument("--output", required=True)
    _add_model_flags(dec)
    dec.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--data", help="directory of VXW0 volumes")
    tr.add_argument("--synthetic", type=int, default=0,
                    help="train on N synthetic volumes instead of --data")
    tr.add_argument("--synthetic-dims", default="32,32,32")
    tr.add_argument("--output", required=True, help="model file to write")
    tr.add_argument("--log", help="training log CSV")
    tr.add_argument("--lambda", dest="lambda_", type=float, default=16.0,
                    help=f"rate-distortion weight, grid {LAMBDA_CHOICES}")
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--steps", default="2000,2000,6000",
                    help="per-stage step counts (entropy, transform, joint)")
    tr.add_argument("--crop", type=int, default=16, help="training crop edge")
    tr.add_argument("--holdout", type=int, default=4, help="validation volumes")
    _add_model_flags(tr)

    ev = sub.add_parser("eval", help="encode+decode and report PSNR / bpp")
    _add_input_flags(ev)
    _add_model_flags(ev)
    ev.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    rd = sub.add_parser("rd-curve", help="sweep quantization steps, write CSV")
    _add_input_flags(rd)
    _add_model_flags(rd)
    rd.add_argument("--output", required=True, help="CSV path")
    rd.add_argument("--qs-grid", default="1,4,16,64,128")
    rd.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    ver = sub.add_parser("verify", help="roundtrip a volume and check integrity")
    _add_input_flags(ver)
    _add_model_flags(ver)
    ver.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    return ap


def _seed_of(args) -> int:
    env = os.environ.get("VOXWAVE_SEED")
    return int(env) if env else args.seed


def _load_input(args) -> Volume:
    path = Path(args.input)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"VXW0":
        return read_volume(path)
    if not args.dims:
        raise UsageError("raw input needs --dims D,H,W")
    dims = tuple(int(d) for d in args.dims.split(","))
    return load_raw(path, dims, args.bit_depth, args.signed)


def _get_model(args):
    if args.model:
        return load_model(args.model)
    cfg = CodecConfig(levels=args.levels, width=args.width, sharing=args.sharing,
                      granularity=args.granularity, transform_kind=args.transform,
                      entropy=args.entropy, lossless=args.lossless, qs=args.qs,
                      block=(args.block, args.block, args.block))
    return build_model(cfg, seed=_seed_of(args))


def _mode(args, model) -> str:
    return "lossless" if (args.lossless or model.config.lossless) else "lossy"


def _reference_for(vol: Volume, out: Volume) -> Volume:
    if out.bit_depth == vol.bit_depth:
        return vol
    from .volume import normalize_minmax

    return normalize_minmax(vol)


def _cmd_encode(args) -> int:
    vol = _load_input(args)
    model = _get_model(args)
    data = encode_volume(vol, model, mode=_mode(args, model),
                         force_normalize=args.normalize, jobs=args.jobs)
    Path(args.output).write_bytes(data)
    bpp = 8.0 * len(data) / vol.data.size
    print(f"encoded {vol.dims} -> {len(data)} bytes ({bpp:.4f} bpp)")
    return 0


def _cmd_decode(args) -> int:
    data = Path(args.input).read_bytes()
    model = _get_model(args)
    vol = decode_volume(data, model, jobs=args.jobs)
    write_volume(args.output, vol)
    print(f"decoded {vol.dims} ({vol.bit_depth}-bit)")
    return 0


def _cmd_eval(args) -> int:
    vol = _load_input(args)
    model = _get_model(args)
    data = encode_volume(vol, model, mode=_mode(args, model),
                         force_normalize=args.normalize, jobs=args.jobs)
    out = decode_volume(data, model, jobs=args.jobs)
    psnr, bpp = metrics(_reference_for(vol, out), out, len(data))
    print(f"PSNR: {psnr if psnr != float('inf') else 'inf'}"
          + (" dB" if psnr != float("inf") else ""))
    print(f"bpp: {bpp:.6f}")
    return 0


def _cmd_rd_curve(args) -> int:
    vol = _load_input(args)
    rows = []
    for qs in (float(q) for q in args.qs_grid.split(",")):
        args.qs = qs
        model = _get_model(args)
        model.config.qs = qs
        data = encode_volume(vol, model, mode="lossy",
                             force_normalize=args.normalize, jobs=args.jobs)
        out = decode_volume(data, model, jobs=args.jobs)
        psnr, bpp = metrics(_reference_for(vol, out), out, len(data))
        rows.append((qs, bpp, psnr))
        print(f"qs={qs:g}: bpp={bpp:.4f} psnr={psnr:.3f}")
    with open(args.output, "w") as f:
        f.write("qs,bpp,psnr\n")
        for qs, bpp, psnr in rows:
            f.write(f"{qs:g},{bpp:.6f},{psnr:.6f}\n")
    return 0


def _cmd_verify(args) -> int:
    vol = _load_input(args)
    model = _get_model(args)
    mode = _mode(args, model)
    data = encode_volume(vol, model, mode=mode,
                         force_normalize=args.normalize, jobs=args.jobs)
    out = decode_volume(data, model, jobs=args.jobs)
    if mode == "lossless":
        src = _reference_for(vol, out).data
        if np.array_equal(out.data, src):
            print("verify: bit-exact roundtrip "
                  f"({len(data)} bytes, {8 * len(data) / vol.data.size:.4f} bpp)")
            return 0
        print("verify: FAILED, reconstruction differs", file=sys.stderr)
        return 3
    psnr, bpp = metrics(_reference_for(vol, out), out, len(data))
    print(f"verify: lossy roundtrip ok (PSNR {psnr:.3f} dB, {bpp:.4f} bpp)")
    return 0


def _cmd_train(args) -> int:
    if args.synthetic > 0:
        dims = tuple(int(d) for d in args.synthetic_dims.split(","))
        volumes = make_corpus(args.synthetic, dims, seed=_seed_of(args))
    elif args.data:
        paths = sorted(Path(args.data).glob("*.vxw"))
        if not paths:
            raise FormatError(f"no .vxw volumes in {args.data}")
        volumes = [read_volume(p).data for p in paths]
    else:
        raise UsageError("train needs --data or --synthetic N")
    holdout = max(1, min(args.holdout, len(volumes) - 1)) if len(volumes) > 1 else 0
    val_set = volumes[:holdout] if holdout else volumes
    train_set = volumes[holdout:] if holdout else volumes
    steps = [int(s) for s in args.steps.split(",")]
    stages = tuple(
        (groups, n) for groups, n in zip(
            (("entropy", "post"), ("transform",), ("transform", "entropy", "post")),
            steps,
        )
    )
    cfg = TrainConfig(lambda_=args.lambda_, lr=args.lr, stages=stages,
                      crop=(args.crop,) * 3, seed=_seed_of(args))
    ccfg = CodecConfig(levels=args.levels, width=args.width, sharing=args.sharing,
                       granularity=args.granularity, transform_kind=args.transform,
                       entropy=args.entropy, lossless=args.lossless, qs=args.qs,
                       block=(args.block,) * 3)
    model, log = train(train_set, cfg, codec_config=ccfg, val_set=val_set)
    save_model(model, args.output)
    if args.log:
        write_log_csv(args.log, log)
    print(f"trained model written to {args.output} ({len(log)} steps)")
    return 0


_COMMANDS = {
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "rd-curve": _cmd_rd_curve,
    "verify": _cmd_verify,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, GeometryError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DecodeError as e:
        print(f"decode error: {e}", file=sys.stderr)
        return 3
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
