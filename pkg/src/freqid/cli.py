"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure, 3 a training run diverged (its partial outputs are kept).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .errors import InvalidArgumentError, NumericDivergenceError

log = logging.getLogger("freqid")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class Diverged(Exception):
    pass


def _write_json(path, doc):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _require_file(path, what):
    if not path:
        raise InvalidArgumentError(f"{what} path is required")
    if not os.path.isfile(path):
        raise InvalidArgumentError(f"{what} {path!r} does not exist")


def _dataset(rc):
    from .synthdata import build_dataset, dataset_from_samples, load_dataset

    if rc.paths.data:
        return dataset_from_samples(load_dataset(rc.paths.data))
    d = rc.data
    return build_dataset(d.n_identities, d.videos_per_identity, d.frames, d.height, d.width, d.seed)


def _towers(rc, dataset, out):
    from .pretrain import load_bundle, pretrain_towers, save_bundle

    if rc.paths.towers:
        return load_bundle(rc.paths.towers)
    log.info("no tower directory given; pretraining towers into %s", os.path.join(out, "towers"))
    bundle, _ = pretrain_towers(dataset, rc.towers)
    save_bundle(os.path.join(out, "towers"), bundle, rc.towers, len(dataset.identities))
    return bundle


def _pairs(rc, dataset):
    from .analysis import build_eval_pairs

    return build_eval_pairs(dataset.identities, rc.eval.n_pairs, rc.model.dit.frames, rc.data.height, rc.data.width, rc.eval.seed)


def _report_header(rc, command):
    return {"command": command, "version": __version__, "config": rc.to_dict()}


# ---------------------------------------------------------------- commands


def cmd_gen_data(rc, args):
    from .synthdata import save_dataset

    path = os.path.join(args.out, "dataset.bin")
    save_dataset(_dataset(rc).samples, path)
    print(path)


def cmd_train_towers(rc, args):
    from .pretrain import pretrain_towers, save_bundle

    dataset = _dataset(rc)
    bundle, losses = pretrain_towers(dataset, rc.towers)
    paths = save_bundle(os.path.join(args.out, "towers"), bundle, rc.towers, len(dataset.identities))
    _write_json(os.path.join(args.out, "towers", "losses.json"), dict(_report_header(rc, "train-towers"), losses=losses))
    print(json.dumps(paths, sort_keys=True))


def cmd_train(rc, args):
    from .trainer import run_training

    dataset = _dataset(rc)
    bundle = _towers(rc, dataset, args.out)
    result = run_training(rc.train, rc.model, rc.plan, dataset.samples, bundle.towers(),
                          rc.schedule.build(), out_dir=args.out, tag="model")
    summary = dict(_report_header(rc, "train"), steps=result.state.step, diverged=result.diverged,
                   reason=result.state.divergence_reason, checkpoints=result.checkpoints)
    _write_json(os.path.join(args.out, "train_summary.json"), summary)
    print(json.dumps(result.checkpoints, sort_keys=True))
    if result.diverged:
        raise Diverged(result.state.divergence_reason)


def _load_checkpoint(rc):
    from .trainer import load_model

    model, _ = load_model(rc.paths.checkpoint)
    return model


def cmd_sample(rc, args):
    import torch

    from .analysis import build_eval_pairs
    from .backbone import unpatchify
    from .diffusion import sample
    from .extractors import images_to_tensor
    from .injection import Conditioning
    from .synthdata import caption_from_words

    model = _load_checkpoint(rc)
    dataset = _dataset(rc)
    pair = build_eval_pairs([dataset.identities[args.identity]], 1, model.cfg.dit.frames, rc.data.height, rc.data.width,
                            rc.eval.seed)[0]
    ref = np.load(args.ref).astype(np.float32) if args.ref else pair.ref_face
    kps = pair.kps_image
    caption = caption_from_words(args.prompt) if args.prompt else pair.caption
    tokens = torch.as_tensor(np.asarray(caption, dtype=np.int64))[None]
    cond = Conditioning(images_to_tensor(ref[None]), images_to_tensor(kps[None]))
    dit = model.cfg.dit
    lat = sample(model.denoiser(tokens, cond), tokens, cond, rc.sampler, rc.schedule.build(), (1,) + dit.latent_shape)
    video = ((unpatchify(lat, dit.patch)[0].clamp(-1, 1) + 1) / 2).numpy().astype(np.float32)
    path = os.path.join(args.out, "video.npy")
    np.save(path, video)
    if args.frames:
        for i, frame in enumerate(video):
            img = np.round(frame * 255).astype(np.uint8)
            with open(os.path.join(args.out, f"frame_{i:03d}.ppm"), "wb") as fh:
                fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())
    print(path)


def cmd_evaluate(rc, args):
    from .analysis import evaluate

    model = _load_checkpoint(rc)
    dataset = _dataset(rc)
    bundle = _towers(rc, dataset, args.out)
    report, _ = evaluate(model, bundle, _pairs(rc, dataset), rc.sampler, rc.schedule.build(), rc.eval.split_radius)
    doc = dict(_report_header(rc, "evaluate"), metrics=report.to_dict())
    _write_json(os.path.join(args.out, "metrics.json"), doc)
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_ablate_injection(rc, args):
    from .analysis import run_injection_ablation

    dataset = _dataset(rc)
    bundle = _towers(rc, dataset, args.out)
    report = run_injection_ablation(rc.ablation.plans, rc.train, rc.model, dataset.samples, bundle, _pairs(rc, dataset),
                                    rc.sampler, rc.schedule.build(), out_dir=args.out, fault_plans=rc.ablation.fault_plans)
    report.config = dict(report.config, run=rc.to_dict())
    report.write(os.path.join(args.out, "injection_ablation"))
    sys.stdout.write(report.to_csv())
    if report.unstable:
        raise Diverged("one or more plans diverged")


def cmd_ablate_components(rc, args):
    from .analysis import run_component_ablation

    dataset = _dataset(rc)
    bundle = _towers(rc, dataset, args.out)
    report = run_component_ablation(rc.ablation.variants, rc.train, rc.model, dataset.samples, bundle,
                                    _pairs(rc, dataset), rc.sampler, rc.schedule.build(), out_dir=args.out)
    report.config = dict(report.config, run=rc.to_dict())
    report.write(os.path.join(args.out, "component_ablation"))
    sys.stdout.write(report.to_csv())
    if report.unstable:
        raise Diverged("one or more variants diverged")


def cmd_ablate_steps(rc, args):
    from .analysis import run_steps_ablation

    model = _load_checkpoint(rc)
    dataset = _dataset(rc)
    bundle = _towers(rc, dataset, args.out)
    report = run_steps_ablation(model, bundle, _pairs(rc, dataset), rc.ablation.t_values, rc.sampler, rc.schedule.build())
    report.config = dict(report.config, run=rc.to_dict())
    report.write(os.path.join(args.out, "steps_ablation"))
    sys.stdout.write(report.to_csv())


def cmd_spectrum(rc, args):
    from .analysis import band_energy, fourier_spectrum, spectrum_to_pgm

    video = np.load(args.video)
    mask = np.load(args.mask) if args.mask else None
    spec_map, profile = fourier_spectrum(video, mask)
    low, high = band_energy(profile, rc.eval.split_radius)
    doc = dict(_report_header(rc, "spectrum"), video=args.video, mask=args.mask, low_band_energy=low, high_band_energy=high,
               profile={"radial_bins": profile.radial_bins.tolist(), "log_amplitude": profile.log_amplitude.tolist(),
                        "relative": profile.relative.tolist()})
    _write_json(os.path.join(args.out, "spectrum.json"), doc)
    with open(os.path.join(args.out, "spectrum.csv"), "w") as fh:
        fh.write("radius,log_amplitude,relative\n")
        for r, a, rel in zip(profile.radial_bins, profile.log_amplitude, profile.relative):
            fh.write(f"{r:.6f},{a:.6f},{rel:.6f}\n")
    with open(os.path.join(args.out, "spectrum.pgm"), "wb") as fh:
        fh.write(spectrum_to_pgm(spec_map))
    print(json.dumps({"low_band_energy": low, "high_band_energy": high}))


def cmd_curate(rc, args):
    from .curation import CurationParams, curate

    params = rc.curation
    if args.params:
        with open(args.params) as fh:
            overrides = json.load(fh)
        params = CurationParams(**dict(asdict(params), **overrides))
    for record in curate(sys.stdin, params):
        sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-towers": cmd_train_towers,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "ablate-injection": cmd_ablate_injection,
    "ablate-components": cmd_ablate_components,
    "ablate-steps": cmd_ablate_steps,
    "spectrum": cmd_spectrum,
    "curate": cmd_curate,
}
NEEDS_CHECKPOINT = {"sample", "evaluate", "ablate-steps"}
WRITES_OUT = set(COMMANDS) - {"curate"}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="seed applied to every random stream")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="freqid", description="identity-conditioned toy video diffusion")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in NEEDS_CHECKPOINT:
            p.add_argument("--checkpoint", help="model checkpoint (overrides paths.checkpoint)")
        if name == "sample":
            p.add_argument("--ref", help="aligned reference face as .npy (S, S, 3) in [0, 1]")
            p.add_argument("--prompt", help="caption words, e.g. 'bg3 left close still smile'")
            p.add_argument("--identity", type=int, default=0, help="dataset identity for the default reference")
            p.add_argument("--frames", action="store_true", help="also write PPM frames")
        if name == "spectrum":
            p.add_argument("--video", required=True, help=".npy video (T, H, W[, 3])")
            p.add_argument("--mask", help=".npy region mask (T, H, W) or (H, W)")
        if name == "curate":
            p.add_argument("--params", help="JSON file of curation parameters")
    return parser


def _validate_inputs(rc, args):
    from .curation import CurationParams
    from .synthdata import caption_from_words

    if args.command in NEEDS_CHECKPOINT:
        _require_file(rc.paths.checkpoint, "checkpoint")
    if rc.paths.data:
        _require_file(rc.paths.data, "dataset")
    if rc.paths.towers:
        _require_file(os.path.join(rc.paths.towers, "face.ckpt"), "tower directory")
    if args.command == "sample":
        if args.ref:
            _require_file(args.ref, "reference image")
        if args.prompt:
            caption_from_words(args.prompt)
        if not 0 <= args.identity < rc.data.n_identities:
            raise InvalidArgumentError(f"identity must lie in [0, {rc.data.n_identities})")
    if args.command == "spectrum":
        _require_file(args.video, "video")
        if args.mask:
            _require_file(args.mask, "mask")
    if args.command == "curate" and args.params:
        _require_file(args.params, "curation params")
        try:
            with open(args.params) as fh:
                overrides = json.load(fh)
            CurationParams(**dict(asdict(rc.curation), **overrides))
        except (json.JSONDecodeError, TypeError) as exc:
            raise InvalidArgumentError(f"invalid curation params: {exc}") from exc


def main(argv=None):
    from .config import resolve

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if getattr(args, "checkpoint", None):
            overrides.append(f"paths.checkpoint={json.dumps(args.checkpoint)}")
        rc = resolve(args.config, overrides, args.seed)
        _validate_inputs(rc, args)
    except (InvalidArgumentError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        import torch

        torch.set_num_threads(1)
        if args.command in WRITES_OUT:
            os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](rc, args)
    except Diverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericDivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
