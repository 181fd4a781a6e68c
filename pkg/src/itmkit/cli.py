"""Command-line entry point: ``itmkit <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 bad input, 3 bad configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import hdrio
from .config import RunConfig
from .errors import ConfigError, FormatError, GradientError, ItmError, ShapeError
from .metrics import EvaluationError

log = logging.getLogger("itmkit")

EXIT_RUNTIME, EXIT_INPUT, EXIT_CONFIG = 1, 2, 3
ABLATION_VARIANTS = ("default", "configA", "configB", "configC", "configD", "configE")


class InputError(ItmError):
    """Unreadable or missing command inputs (exit code 2)."""


def _load_config(args):
    cfg = RunConfig.load(getattr(args, "config", None))
    return cfg.with_seed(getattr(args, "seed", None))


def _dump_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth

def _curves(cfg):
    from .pipeline import load_response_curves, split_curves

    pc = cfg.pipeline
    if pc.crf_source in ("gamma", "parametric"):
        return load_response_curves("gamma", pc.crf_count, seed=pc.seed)
    try:
        curves = load_response_curves(pc.crf_source)
    except OSError as exc:
        raise InputError(f"cannot read CRF file {pc.crf_source}: {exc}") from None
    train, _ = split_curves(curves)
    return train[:pc.crf_count]


def cmd_synth(args):
    from .pipeline import NoiseParams, image_rng, synthesize_pair

    cfg = _load_config(args)
    src = Path(args.hdr_dir)
    if not src.is_dir():
        raise InputError(f"HDR directory {src} does not exist")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in hdrio.HDR_SUFFIXES)
    if not files:
        raise InputError(f"no .hdr/.pfm files in {src}")
    images, problems = {}, []
    for p in files:
        try:
            images[p] = hdrio.read_hdr_any(p)
        except (OSError, FormatError, ValueError) as exc:
            problems.append(f"{p.name}: {exc}")
    if problems:
        raise InputError("unreadable HDR inputs:\n  " + "\n  ".join(problems))

    pc = cfg.pipeline
    curves = _curves(cfg)
    out = Path(args.out)
    for sub in ("ldr", "hdr", "crf"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    pairs, index = [], 0
    for p, img in images.items():
        for j, t in enumerate(pc.exposures):
            for k, curve in enumerate(curves):
                rng = image_rng(pc.seed, index)
                noise = NoiseParams.sample(rng, pc.sigma_s_max, pc.sigma_c_max) if pc.noise else None
                quality = int(rng.integers(pc.jpeg_quality[0], pc.jpeg_quality[1] + 1)) if pc.jpeg else None
                pair = synthesize_pair(img, t, curve, noise)
                stem = f"{p.stem}_t{j:02d}_c{k:03d}"
                if quality is None:
                    ldr_name = f"ldr/{stem}.png"
                    hdrio.write_png(out / ldr_name, pair.ldr)
                else:
                    ldr_name = f"ldr/{stem}.jpg"
                    hdrio.write_jpeg(out / ldr_name, pair.ldr, quality)
                hdrio.write_pfm(out / f"hdr/{stem}.pfm", pair.hdr)
                hdrio.write_pfm(out / f"crf/{stem}.pfm", pair.crf_target)
                pairs.append({
                    "id": stem, "source": p.name, "ldr": ldr_name, "hdr": f"hdr/{stem}.pfm",
                    "crf_target": f"crf/{stem}.pfm", "exposure": t, "crf": curve.name,
                    "sigma_s": noise.sigma_s if noise else 0.0, "sigma_c": noise.sigma_c if noise else 0.0,
                    "noise_seed": noise.seed if noise else None, "jpeg_quality": quality,
                    "pair_index": index,
                })
                index += 1
    _dump_json(out / "manifest.json", {"config": cfg.to_dict(), "seed": pc.seed, "pairs": pairs})
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


# ---------------------------------------------------------------------------
# dataset loading for train / ablate

def load_dataset(data_dir):
    from .training import TrainingSample

    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.json"
    if not manifest.exists():
        raise InputError(f"{manifest} not found; run `itmkit synth` first")
    doc = json.loads(manifest.read_text())
    samples = []
    for entry in doc["pairs"]:
        try:
            ldr = hdrio.read_ldr(data_dir / entry["ldr"])
            ht = hdrio.read_pfm(data_dir / entry["hdr"]).astype(np.float64)
            crf = hdrio.read_pfm(data_dir / entry["crf_target"]).astype(np.float64)
        except (OSError, FormatError) as exc:
            raise InputError(f"pair {entry.get('id')}: {exc}") from None
        dim = np.minimum(ht, 1.0)
        samples.append(TrainingSample(ldr, dim, ht - dim, crf, provenance=entry))
    if not samples:
        raise InputError(f"{manifest} lists no pairs")
    return samples


def _train_run(samples, cfg, out_dir):
    from .training import train

    def progress(row):
        if row["iteration"] % 100 == 0 or row["iteration"] == cfg.train.max_iters:
            log.info("iter %d  loss %.5f", row["iteration"], row["total"])

    return train(samples, cfg.network, cfg.train, out_dir=out_dir, progress=progress,
                 config_echo=cfg.to_dict())


def cmd_train(args):
    import dataclasses

    cfg = _load_config(args)
    if args.iters:
        cfg.train = dataclasses.replace(cfg.train, max_iters=args.iters)
    samples = load_dataset(args.data)
    res = _train_run(samples, cfg, Path(args.out))
    print(f"trained {cfg.train.max_iters} iterations; final loss {res.log[-1]['total']:.6f}")
    return 0


# ---------------------------------------------------------------------------
# infer / eval

def cmd_infer(args):
    from .hisn import load_checkpoint
    from .lamn import mask_to_png
    from .training import predict

    try:
        params, _, header = load_checkpoint(args.checkpoint)
        ldr = hdrio.read_ldr(args.input)
    except (OSError, FormatError) as exc:
        raise InputError(str(exc)) from None
    train_cfg = header.get("extra", {}).get("train", {})
    tau = train_cfg.get("tau", 0.95)
    variant = train_cfg.get("mask_variant", "default")
    h, _, _, mask = predict(params, ldr, tau=tau, mask_variant=variant)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    hdrio.write_hdr_any(out, h.astype(np.float32))
    _dump_json(out.with_name(out.name + ".json"),
               {"checkpoint": str(args.checkpoint), "input": str(args.input), "config": header.get("extra", {})})
    if args.mask_png:
        mask_to_png(mask, args.mask_png)
    if args.preview_dir:
        hdrio.exposure_stack_preview(h, out_dir=args.preview_dir, prefix=out.stem)
    print(f"wrote {out} ({h.shape[0]}x{h.shape[1]})")
    return 0


def cmd_eval(args):
    from .metrics import evaluate

    cfg = _load_config(args)
    for d in (args.pred_dir, args.ref_dir):
        if not Path(d).is_dir():
            raise InputError(f"{d} is not a directory")
    report = evaluate(args.pred_dir, args.ref_dir, args.out, config=cfg.to_dict())
    m = report.mean
    print(f"{len(report.rows)} images: PU-PSNR {m.pu_psnr_db:.3f} dB, PU-SSIM {m.pu_ssim:.4f}, "
          f"PU-MS-SSIM {m.pu_ms_ssim:.4f}")
    if report.flagged:
        print(f"warning: {len(report.missing)} files without counterpart", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# ablate

def variant_config(cfg: RunConfig, variant):
    """Network/mask overrides for one ablation variant."""
    import dataclasses

    net, tr = cfg.network, cfg.train
    if variant in ("configA", "configB"):
        net = dataclasses.replace(net, variant=variant)
    elif variant in ("configC", "configD", "configE"):
        tr = dataclasses.replace(tr, mask_variant=variant)
    elif variant != "default":
        raise ConfigError(f"unknown ablation variant {variant!r}")
    return RunConfig(pipeline=cfg.pipeline, network=net, train=tr, schema_version=cfg.schema_version)


def cmd_ablate(args):
    import dataclasses

    from .metrics import psnr, pu_encode
    from .training import evaluate_loss, predict

    cfg = _load_config(args)
    if args.iters:
        cfg.train = dataclasses.replace(cfg.train, max_iters=args.iters)
    samples = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in args.variants or ABLATION_VARIANTS:
        vcfg = variant_config(cfg, variant)
        res = _train_run(samples, vcfg, out / variant)
        final = evaluate_loss(res.params, samples, vcfg.train)
        scores = []
        for s in samples:
            h = predict(res.params, s.ldr, tau=vcfg.train.tau, mask_variant=vcfg.train.mask_variant)[0]
            ref = s.dim + s.bright
            scores.append(psnr(pu_encode(h, ref), pu_encode(ref, ref)))
        rows.append({"variant": variant, "final_loss": final, "last_iter_loss": res.log[-1]["total"],
                     "pu_psnr_db": float(np.mean(scores))})
        print(f"{variant:<8} loss {final:.6f}  PU-PSNR {rows[-1]['pu_psnr_db']:.2f} dB")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    _dump_json(out / "ablation.json", {"config": cfg.to_dict(), "rows": rows})
    return 0


# ---------------------------------------------------------------------------
# gradcheck / preview / dump-activations

def cmd_gradcheck(args):
    from .gradcheck import format_table, run_all

    results = run_all(size=args.size, width=args.width, seed=args.seed or 0, coords=args.coords)
    print(format_table(results))
    ok = all(r.passed for r in results)
    print("all gradient checks passed" if ok else "gradient check FAILED")
    return 0 if ok else EXIT_RUNTIME


def _parse_curve(spec):
    from .pipeline import gamma_curve, identity_curve

    if spec in (None, "identity"):
        return identity_curve()
    try:
        return gamma_curve(float(spec))
    except ValueError:
        raise ConfigError(f"--crf expects 'identity' or a gamma value, got {spec!r}") from None


def cmd_preview(args):
    try:
        img = hdrio.read_hdr_any(args.hdr)
    except (OSError, FormatError) as exc:
        raise InputError(str(exc)) from None
    exposures = args.exposures or list(hdrio.PREVIEW_EXPOSURES)
    out = Path(args.out)
    _, paths = hdrio.exposure_stack_preview(img, exposures, _parse_curve(args.crf), out, Path(args.hdr).stem)
    hdrio.write_png(out / f"{Path(args.hdr).stem}_drago.png", hdrio.drago_tonemap(img))
    print(f"wrote {len(paths) + 1} previews to {out}")
    return 0


def cmd_dump_activations(args):
    from .hisn import dump_activations, load_checkpoint
    from .lamn import compute_mask

    try:
        params, _, header = load_checkpoint(args.checkpoint)
        ldr = hdrio.read_ldr(args.input)
    except (OSError, FormatError) as exc:
        raise InputError(str(exc)) from None
    tau = header.get("extra", {}).get("train", {}).get("tau", 0.95)
    x = np.transpose(ldr, (2, 0, 1))[None]
    mask = compute_mask(x, tau).astype(np.float32)
    written = dump_activations(x.astype(np.float32), mask, params, args.out)
    print(f"wrote {len(written)} PNGs to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="itmkit", description="Inverse tone mapping toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="RunConfig JSON (default: $ITMKIT_CONFIG or built-in defaults)")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("synth", help="synthesize LDR/HDR training pairs")
    s.add_argument("--hdr-dir", required=True)
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on a synthesized dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int, default=None, help="override train.max_iters")
    common(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="reconstruct an HDR image from an LDR image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True, help="output .hdr or .pfm")
    s.add_argument("--mask-png", default=None)
    s.add_argument("--preview-dir", default=None)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="PU-PSNR / PU-SSIM / PU-MS-SSIM over two directories")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--ref-dir", required=True)
    s.add_argument("--out", required=True, help="CSV report path")
    common(s, seed=False)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train the default model and Configs A-E")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int, default=None)
    s.add_argument("--variants", nargs="+", choices=ABLATION_VARIANTS, default=None)
    common(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="reverse-mode vs finite-difference gradient table")
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--width", type=int, default=16)
    s.add_argument("--coords", type=int, default=2, help="sampled coordinates per network tensor")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("preview", help="exposure stack and Drago tone map of an HDR image")
    s.add_argument("--hdr", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--exposures", type=float, nargs="+", default=None)
    s.add_argument("--crf", default="identity", help="'identity' or a gamma value such as 2.2")
    s.set_defaults(func=cmd_preview)

    s = sub.add_parser("dump-activations", help="write LAMN scale/bias maps as PNGs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_activations)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, EvaluationError, FormatError, ShapeError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (GradientError, ItmError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
