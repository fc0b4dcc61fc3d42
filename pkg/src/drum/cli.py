"""Command-line surface: toy-corpus generation, prior training, guided
translation, fidelity evaluation and PNG export.

Flags mirror the config dataclasses through dotted keys, e.g.
``--sampler.t-init 0.8``.  Every command echoes its fully resolved
configuration as JSON beside its outputs, and every command is
deterministic given ``--seed``.

Exit codes: 0 success, 1 validation error (bad flags, missing or malformed
inputs), 2 numeric failure (training divergence, failed verification,
eigensolver breakdown).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import zlib
from pathlib import Path

import numpy as np

from . import io as dio
from .errors import (
    DrumError,
    InsufficientDataError,
    InvalidArgumentError,
    NumericFailureError,
    ScheduleInconsistencyError,
    TrainingDivergenceError,
)
from .guidance import GuidanceConfig, ReflectanceZeroingOperator
from .lidar import RangeImage, SensorIntrinsics, TOY_INTRINSICS, denormalize, normalize
from .metrics import feature_matrix, fit_gaussian, frechet_distance, raydrop_ratio
from .models.network import NeuralDenoiser, load_checkpoint, save_checkpoint
from .models.train import TrainConfig, train_denoiser
from .sampler import SamplerConfig, finalize_normalized, translate_tensor
from .toy import ToySceneConfig, gen_toy_scene


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; the spec reserves 2 for
    numeric failures, so route parse errors through the validation path."""

    def error(self, message):
        raise InvalidArgumentError(message)


def _sample_seed(seed: int, name: str) -> np.random.Generator:
    """Per-sample stream derived from the run seed and the file name, so a
    sample's noise does not depend on what else sits in the directory."""
    return np.random.default_rng(
        np.random.SeedSequence((seed, zlib.crc32(name.encode()))))


def _echo_config(path: Path, command: str, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({"command": command, **payload}, f, indent=2, sort_keys=True)
        f.write("\n")


def _asdict(obj) -> dict:
    return dataclasses.asdict(obj)


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise InvalidArgumentError(f"{directory}: not a directory")
    return sorted(directory.glob(f"*{dio.IMAGE_SUFFIX}"))


# ---------------------------------------------------------------------------
# argument groups
# ---------------------------------------------------------------------------

def _add_sensor_args(p: _Parser):
    d = TOY_INTRINSICS
    p.add_argument("--sensor.height", dest="sensor_height", type=int, default=d.height)
    p.add_argument("--sensor.width", dest="sensor_width", type=int, default=d.width)
    p.add_argument("--sensor.fov-up", dest="sensor_fov_up", type=float, default=d.fov_up)
    p.add_argument("--sensor.fov-down", dest="sensor_fov_down", type=float, default=d.fov_down)
    p.add_argument("--sensor.max-range", dest="sensor_max_range", type=float, default=d.max_range)


def _sensor_from(args) -> SensorIntrinsics:
    return SensorIntrinsics(height=args.sensor_height, width=args.sensor_width,
                            fov_up=args.sensor_fov_up, fov_down=args.sensor_fov_down,
                            max_range=args.sensor_max_range)


def _add_toy_args(p: _Parser):
    d = ToySceneConfig()
    p.add_argument("--toy.n-boxes", dest="toy_n_boxes", type=int, default=d.n_boxes)
    p.add_argument("--toy.drop-base", dest="toy_drop_base", type=float, default=d.drop_base)
    p.add_argument("--toy.drop-glass", dest="toy_drop_glass", type=float, default=d.drop_glass)


def _add_train_args(p: _Parser):
    d = TrainConfig()
    p.add_argument("--train.steps", dest="train_steps", type=int, default=d.steps)
    p.add_argument("--train.batch", dest="train_batch", type=int, default=d.batch)
    p.add_argument("--train.lr", dest="train_lr", type=float, default=d.lr)
    p.add_argument("--train.momentum", dest="train_momentum", type=float, default=d.momentum)
    p.add_argument("--train.holdout-frac", dest="train_holdout_frac", type=float,
                   default=d.holdout_frac)


def _add_sampler_args(p: _Parser):
    sd, gd = SamplerConfig(), GuidanceConfig()
    p.add_argument("--sampler.t-init", dest="sampler_t_init", type=float, default=sd.t_init)
    p.add_argument("--sampler.num-steps", dest="sampler_num_steps", type=int,
                   default=sd.num_steps)
    p.add_argument("--sampler.resample-cycles", dest="sampler_resample_cycles", type=int,
                   default=sd.resample_cycles)
    p.add_argument("--guidance.eta", dest="guidance_eta", type=float, default=gd.eta)
    p.add_argument("--guidance.scale", dest="guidance_scale", type=float,
                   default=gd.guidance_scale)
    p.add_argument("--guidance.jacobian-mode", dest="guidance_jacobian_mode",
                   choices=["exact-vjp", "identity-approx"], default=gd.jacobian_mode)
    p.add_argument("--guidance.mask-mode", dest="guidance_mask_mode",
                   choices=["progressive", "all-ones"], default=gd.mask_mode)


def _sampler_from(args) -> SamplerConfig:
    return SamplerConfig(
        t_init=args.sampler_t_init, num_steps=args.sampler_num_steps,
        resample_cycles=args.sampler_resample_cycles,
        guidance=GuidanceConfig(eta=args.guidance_eta,
                                guidance_scale=args.guidance_scale,
                                jacobian_mode=args.guidance_jacobian_mode,
                                mask_mode=args.guidance_mask_mode),
        seed=args.seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_make_toy(args) -> int:
    out = Path(args.out)
    intr = _sensor_from(args)
    rng = np.random.default_rng(args.seed)
    seeds = rng.integers(0, 2**31 - 1, size=args.n_sim + args.n_real).tolist()
    manifest = {"seed": args.seed, "sensor": _asdict(intr), "files": []}
    count = 0
    for domain, n, offset in (("sim", args.n_sim, 0), ("real", args.n_real, args.n_sim)):
        ddir = out / domain
        if n > 0:
            ddir.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            cfg = ToySceneConfig(domain=domain, n_boxes=args.toy_n_boxes,
                                 drop_base=args.toy_drop_base,
                                 drop_glass=args.toy_drop_glass,
                                 seed=int(seeds[offset + i]))
            img = gen_toy_scene(cfg, intr)
            name = f"{domain}_{i:05d}{dio.IMAGE_SUFFIX}"
            dio.write_range_image(ddir / name, img)
            manifest["files"].append({"path": f"{domain}/{name}",
                                      "domain": domain, "scene_seed": cfg.seed})
            count += 1
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    _echo_config(out / "resolved_config.json", "make-toy", {
        "seed": args.seed, "n_sim": args.n_sim, "n_real": args.n_real,
        "sensor": _asdict(intr),
        "toy": {"n_boxes": args.toy_n_boxes, "drop_base": args.toy_drop_base,
                "drop_glass": args.toy_drop_glass}})
    print(f"wrote {count} images under {out}")
    return 0


def cmd_train_prior(args) -> int:
    data_dir = Path(args.data)
    files = _list_images(data_dir)
    if not files:
        raise InvalidArgumentError(f"{data_dir}: contains no {dio.IMAGE_SUFFIX} files")
    data = np.stack([normalize(dio.read_range_image(p)) for p in files])

    cfg = TrainConfig(steps=args.train_steps, batch=args.train_batch,
                      lr=args.train_lr, seed=args.seed,
                      momentum=args.train_momentum,
                      holdout_frac=args.train_holdout_frac)
    model = load_checkpoint(args.resume) if args.resume else None
    if model is not None:
        print(f"resuming from {args.resume} at step {model.train_step}")

    def log(step, train_loss, holdout):
        print(f"step {step:6d}  train {train_loss:.4f}  holdout {holdout:.4f}")

    model, history = train_denoiser(data, cfg, model=model, log_fn=log)
    ckpt = Path(args.ckpt_out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    _echo_config(ckpt.with_suffix(ckpt.suffix + ".config.json"), "train-prior", {
        "seed": args.seed, "data": str(data_dir), "resume": args.resume,
        "train": _asdict(cfg), "n_images": len(files),
        "initial_holdout": history["initial_holdout"],
        "final_holdout": history["final_holdout"],
        "train_step": model.train_step})
    print(f"saved {ckpt} (step {model.train_step}); "
          f"held-out loss {history['initial_holdout']:.4f} -> {history['final_holdout']:.4f}")
    return 0


def _translate_one(img: RangeImage, name: str, model, operator, cfg):
    rng = _sample_seed(cfg.seed, name)
    y_obs = operator.apply(normalize(img))
    core = translate_tensor(y_obs, model, operator, cfg, rng=rng, on_failure="raise")
    return _assemble_output(core.x0, core.mask0, img)


def _assemble_output(x0_norm, mask0, sim_img: RangeImage) -> RangeImage:
    x0_img = denormalize(x0_norm, sim_img.intrinsics)
    keep = mask0[0] > 0
    return RangeImage(np.where(keep, sim_img.range, np.float32(-1.0)),
                      np.where(keep, x0_img.reflectance, np.float32(0.0)),
                      sim_img.intrinsics)


def cmd_translate(args) -> int:
    model = load_checkpoint(args.ckpt)
    operator = ReflectanceZeroingOperator()
    cfg = _sampler_from(args)
    files = _list_images(Path(args.sim_dir))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out / "resolved_config.json", "translate", {
        "seed": args.seed, "ckpt": args.ckpt, "sim_dir": args.sim_dir,
        "sampler": _asdict(cfg), "batch": args.batch, "jobs": args.jobs})

    statuses: list[dict] = []
    written = 0

    def emit(name: str, img: RangeImage | None, error: str | None = None):
        nonlocal written
        if img is None:
            statuses.append({"file": name, "status": "failed", "error": error})
            print(f"FAILED {name}: {error}", file=sys.stderr)
            return
        dio.write_range_image(out / name, img)
        if args.png:
            dio.export_png(img, out, Path(name).stem)
        statuses.append({"file": name, "status": "ok"})
        written += 1

    if args.jobs > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(args.jobs) as pool:
            results = pool.starmap(
                _translate_job,
                [(args.ckpt, str(p), p.name, cfg) for p in files])
        for p, (ok, payload) in zip(files, results):
            if ok:
                emit(p.name, RangeImage(payload[0], payload[1],
                                        dio.read_range_image(p).intrinsics))
            else:
                emit(p.name, None, payload)
    else:
        for start in range(0, len(files), args.batch):
            chunk = files[start:start + args.batch]
            imgs = [dio.read_range_image(p) for p in chunk]
            rngs = [_sample_seed(cfg.seed, p.name) for p in chunk]
            y_obs = np.stack([operator.apply(normalize(im)) for im in imgs])
            try:
                core = translate_tensor(y_obs, model, operator, cfg,
                                        rng=rngs, on_failure="mark")
                for j, (p, im) in enumerate(zip(chunk, imgs)):
                    if core.failed[j]:
                        emit(p.name, None,
                             f"non-finite state at step {core.failed_step[j]}")
                    else:
                        emit(p.name, _assemble_output(core.x0[j], core.mask0[j], im))
            except NumericFailureError:
                # isolate the offending sample by re-running one at a time
                for p, im in zip(chunk, imgs):
                    try:
                        emit(p.name, _translate_one(im, p.name, model, operator, cfg))
                    except NumericFailureError as exc:
                        emit(p.name, None, f"{exc} (step {exc.step})")

    with open(out / "translate_manifest.json", "w") as f:
        json.dump({"seed": cfg.seed, "results": statuses}, f, indent=2)
        f.write("\n")
    print(f"translated {written}/{len(files)} images into {out}")

    if args.verify:
        bad = _audit_outputs(files, out)
        if bad:
            print(f"label-consistency audit FAILED for {bad} outputs", file=sys.stderr)
            raise NumericFailureError(f"{bad} outputs violate label consistency")
        print("label-consistency audit passed for all outputs")
    return 0


def _translate_job(ckpt: str, path: str, name: str, cfg: SamplerConfig):
    """Worker for --jobs: loads its own model copy (fork shares pages)."""
    try:
        model = _worker_model(ckpt)
        img = dio.read_range_image(path)
        result = _translate_one(img, name, model, ReflectanceZeroingOperator(), cfg)
        return True, (result.range, result.reflectance)
    except DrumError as exc:
        return False, str(exc)


_worker_cache: dict = {}


def _worker_model(ckpt: str) -> NeuralDenoiser:
    if ckpt not in _worker_cache:
        _worker_cache[ckpt] = load_checkpoint(ckpt)
    return _worker_cache[ckpt]


def _audit_outputs(inputs: list[Path], out: Path) -> int:
    """Count outputs whose valid pixels disagree with their input's range."""
    bad = 0
    for p in inputs:
        q = out / p.name
        if not q.exists():
            continue
        sim = dio.read_range_image(p)
        res = dio.read_range_image(q)
        keep = ~res.drop_mask
        if not (np.array_equal(res.range[keep], sim.range[keep])
                and np.all(res.reflectance[res.drop_mask] == 0.0)):
            bad += 1
    return bad


def cmd_eval(args) -> int:
    def load_side(directory, feature_file):
        files = _list_images(Path(directory))
        if not files:
            raise InvalidArgumentError(f"{directory}: contains no images")
        imgs = [dio.read_range_image(p) for p in files]
        feats = (dio.read_feature_set(feature_file) if feature_file
                 else feature_matrix(imgs))
        return imgs, feats

    imgs_a, feats_a = load_side(args.dir_a, args.features_a)
    imgs_b, feats_b = load_side(args.dir_b, args.features_b)
    fd = frechet_distance(fit_gaussian(feats_a), fit_gaussian(feats_b))

    def side_stats(imgs, feats):
        return {
            "n": len(imgs),
            "mean_raydrop_ratio": float(np.mean([raydrop_ratio(im) for im in imgs])),
            "range_hist": feats[:, :32].mean(axis=0).tolist(),
            "reflectance_hist": feats[:, 32:48].mean(axis=0).tolist(),
        }

    report = {"frechet_distance": fd,
              "dir_a": str(args.dir_a), "dir_b": str(args.dir_b),
              "a": side_stats(imgs_a, feats_a), "b": side_stats(imgs_b, feats_b)}
    print(f"FD(builtin features): {fd:.6f}")
    print(f"mean raydrop ratio: a={report['a']['mean_raydrop_ratio']:.4f} "
          f"b={report['b']['mean_raydrop_ratio']:.4f}")
    if args.report:
        rp = Path(args.report)
        rp.parent.mkdir(parents=True, exist_ok=True)
        with open(rp, "w") as f:
            json.dump(report, f, indent=2)
            f.write("\n")
        _echo_config(rp.with_suffix(rp.suffix + ".config.json"), "eval", {
            "dir_a": str(args.dir_a), "dir_b": str(args.dir_b),
            "features_a": args.features_a, "features_b": args.features_b})
    return 0


def cmd_export_png(args) -> int:
    src = Path(args.input)
    files = [src] if src.is_file() else _list_images(src)
    if not files:
        raise InvalidArgumentError(f"{src}: no images to export")
    for p in files:
        dio.export_png(dio.read_range_image(p), args.out, p.stem)
    print(f"exported {len(files)} image(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="drum", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="generate a toy sim/real corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-sim", type=int, default=0)
    p.add_argument("--n-real", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    _add_toy_args(p)
    _add_sensor_args(p)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train-prior", help="train the denoising prior")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_train_args(p)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("translate", help="translate sim images to pseudo-real")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sim-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--png", action="store_true")
    p.add_argument("--verify", action="store_true",
                   help="audit label consistency of all outputs")
    p.add_argument("--batch", type=int, default=16,
                   help="samples per lock-step network batch")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel worker processes")
    _add_sampler_args(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="compare two image sets")
    p.add_argument("--dir-a", required=True)
    p.add_argument("--dir-b", required=True)
    p.add_argument("--features-a", default=None,
                   help="external feature set for side A (.drumfeat)")
    p.add_argument("--features-b", default=None)
    p.add_argument("--report", default=None, help="write a JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-png", help="render images to grayscale PNGs")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_png)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (InvalidArgumentError, InsufficientDataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericFailureError, TrainingDivergenceError,
            ScheduleInconsistencyError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
