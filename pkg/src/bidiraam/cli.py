"""Command-line interface: ``bidiraam {train,fit,eval,synth}``.

Exit codes: 0 success, 2 input or configuration error, 3 fit failure.
"""

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path


from .errors import DegenerateShape, NonDiffeomorphicUpdate, TrackingLost
from .evaluation import CELL_FIELDS, SUMMARY_FIELDS, ExperimentConfig, run_experiment
from .fitting import Fitter, FitterConfig
from .io import (IMAGE_SUFFIXES, ConfigError, FormatError, csv_text, load_model, parse_run_config, read_image,
                 read_pts, save_model, write_pgm, write_pts)
from .model import train_aam

EXIT_OK, EXIT_INPUT, EXIT_FIT = 0, 2, 3
KINDS = {"sim": "similarity", "similarity": "similarity", "affine": "affine"}


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


def _pairs(images_dir, landmarks_dir):
    images_dir, landmarks_dir = Path(images_dir), Path(landmarks_dir)
    for d in (images_dir, landmarks_dir):
        if not d.is_dir():
            raise InputError(f"{d}: not a directory")
    images = {p.stem: p for p in sorted(images_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    marks = {p.stem: p for p in sorted(landmarks_dir.iterdir()) if p.suffix.lower() == ".pts"}
    problems = [f"{landmarks_dir / (s + '.pts')}: missing landmark file for image {images[s]}"
                for s in images if s not in marks]
    problems += [f"{images_dir / s}.*: missing image for landmark file {marks[s]}"
                 for s in marks if s not in images]
    if problems:
        raise InputError("\n".join(problems))
    if not images:
        raise InputError(f"{images_dir}: no images found")
    return [(images[s], marks[s]) for s in sorted(images)]


def load_annotated(images_dir, landmarks_dir):
    """Read matching ``<stem>.pgm|.npy`` / ``<stem>.pts`` pairs, sorted by stem."""
    images, shapes, problems = [], [], []
    for img_path, pts_path in _pairs(images_dir, landmarks_dir):
        try:
            images.append(read_image(img_path))
            shapes.append(read_pts(pts_path))
        except (OSError, FormatError) as exc:
            problems.append(str(exc))
    if problems:
        raise InputError("\n".join(problems))
    sizes = {s.size for s in shapes}
    if len(sizes) > 1:
        raise InputError(f"landmark files disagree on the point count: {sorted(s // 2 for s in sizes)}")
    return images, shapes


class _Annotated:
    def __init__(self, images, shapes, anchors=None):
        self.images, self.shapes, self.anchors = images, shapes, anchors


def cmd_train(args):
    images, shapes = load_annotated(args.images, args.landmarks)
    if len(images) < 2:
        raise InputError("training needs at least two annotated images")
    av = args.appearance_variance if args.appearance_variance is not None else args.variance
    try:
        aam = train_aam(images, shapes, args.variance, av, KINDS[args.global_kind], args.mode)
    except (DegenerateShape, ValueError) as exc:
        raise InputError(f"training failed: {exc}") from None
    save_model(args.out, aam)
    print(f"n = {aam.shape_model.n} shape modes (retained variance {args.variance})")
    print(f"m = {aam.m} appearance modes (retained variance {av})")
    print(f"k = {aam.k} global parameters ({aam.global_basis.kind}, {aam.mode})")
    print(f"model written to {args.out}")
    return EXIT_OK


def _report_paths(out):
    out = Path(out)
    stem = out.with_suffix("") if out.suffix == ".pts" else out
    return out if out.suffix == ".pts" else out.with_suffix(".pts"), Path(f"{stem}.report.json"), \
        Path(f"{stem}.errors.csv")


def _write_report(out, fitter, state, status, message=None):
    pts_path, report_path, errors_path = _report_paths(out)
    write_pts(pts_path, fitter.shape(state))
    report = {
        "algorithm": fitter.config.name, "status": status, "iterations": int(state.iteration),
        "converged": bool(state.converged), "final_sse": float(state.error_history[-1]),
        "p": state.p.tolist(), "q": state.q.tolist(), "lambda": state.lam.tolist(),
        "flags": [f"{it}: {msg}" for it, msg in state.flags],
    }
    if message:
        report["message"] = message
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    errors_path.write_text(csv_text([{"iteration": i, "sse": e} for i, e in enumerate(state.error_history)],
                                    ("iteration", "sse")))
    return pts_path, report_path


def cmd_fit(args):
    try:
        aam = load_model(args.model)
        image = read_image(args.image)
        init = read_pts(args.init)
    except (OSError, FormatError) as exc:
        raise InputError(str(exc)) from None
    if init.size != aam.s0.size:
        raise InputError(f"{args.init}: {init.size // 2} points, model has {aam.s0.size // 2}")
    kind = KINDS[args.global_kind] if args.global_kind else aam.global_basis.kind
    try:
        config = FitterConfig(algorithm=args.algo, bidirectional=args.bi, global_kind=kind,
                              constrained=args.constrain, max_iters=args.max_iters, param_tol=args.tol)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    fitter = Fitter(aam, config)
    try:
        state = fitter.fit(image, init)
    except (TrackingLost, NonDiffeomorphicUpdate) as exc:
        state = getattr(exc, "state", None)
        if state is not None and state.error_history:
            paths = _write_report(args.out, fitter, state, "failed", str(exc))
            print(f"partial report written to {paths[1]}", file=sys.stderr)
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    pts_path, report_path = _write_report(args.out, fitter, state, "ok")
    print(f"{config.name}: {state.iteration} iterations, converged={state.converged}, "
          f"final sse={state.error_history[-1]:.6g}")
    print(f"landmarks written to {pts_path}, report to {report_path}")
    return EXIT_OK


def _experiment_from_config(cfg):
    exp = dict(cfg["experiment"])
    fit_kw = {k: exp.pop(k) for k in ("max_iters", "param_tol") if k in exp}
    names = exp.pop("algorithms", ("SIC",))
    try:
        algorithms = tuple(FitterConfig.from_name(n, **fit_kw) for n in names)
        return ExperimentConfig(algorithms=algorithms, **exp)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _datasets_from_config(cfg):
    data = cfg.get("data", {})
    if data.get("source", "synthetic") == "files":
        train = _Annotated(*load_annotated(data["images"], data["landmarks"]))
        test = None
        if "test_images" in data or "test_landmarks" in data:
            if not {"test_images", "test_landmarks"} <= data.keys():
                raise ConfigError("held-out file data needs both 'test_images' and 'test_landmarks'")
            test = _Annotated(*load_annotated(data["test_images"], data["test_landmarks"]))
        return train, test
    from .synthetic import SyntheticSpec, generate_synthetic_dataset
    try:
        spec = SyntheticSpec(**cfg.get("synthetic", {}))
        train = generate_synthetic_dataset(spec)
        test = generate_synthetic_dataset(replace(spec, **cfg["test"])) if "test" in cfg else None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"synthetic data: {exc}") from None
    return train, test


def cmd_eval(args):
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise InputError(str(exc)) from None
    cfg = parse_run_config(text, args.config)
    config = _experiment_from_config(cfg)
    train, test = _datasets_from_config(cfg)
    try:
        metrics = run_experiment(train, config, test)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "cells.csv").write_text(csv_text(metrics.cells, CELL_FIELDS))
        (out / "summary.csv").write_text(csv_text(metrics.summary(), SUMMARY_FIELDS))
    except OSError as exc:
        raise InputError(f"{out}: {exc}") from None
    print(csv_text(metrics.summary(), SUMMARY_FIELDS), end="")
    return EXIT_OK


def cmd_synth(args):
    from .synthetic import SyntheticSpec, generate_synthetic_dataset
    try:
        spec = SyntheticSpec(landmark_count=args.landmarks, shape_modes=args.shape_modes,
                             shape_amplitude=args.shape_amplitude, texture_modes=args.texture_modes,
                             texture_amplitude=args.texture_amplitude, global_distortion=args.distortion,
                             rotation_deg=args.rotation, scale_jitter=args.scale_jitter, shear=args.shear,
                             translation_px=args.translation, noise_sigma=args.noise,
                             image_size=(args.size, args.size), count=args.count,
                             model_seed=args.model_seed, rng_seed=args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    ds = generate_synthetic_dataset(spec)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (img, shape, sample) in enumerate(zip(ds.images, ds.shapes, ds.samples)):
            name = f"face_{i:04d}"
            write_pgm(out / f"{name}.pgm", img)
            write_pts(out / f"{name}.pts", shape)
            entries.append({"name": name, **sample.to_dict()})
        manifest = {
            "generator": "bidiraam.synthetic", "version": 1, "spec": asdict(spec),
            "anchors": list(ds.anchors),
            "quantization": "16-bit PGM; intensity range [-0.25, 1.25], widened to cover each image, "
                            "mapped to 0..65535 and stored in a header comment",
            "samples": entries,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    except OSError as exc:
        raise InputError(f"{out}: cannot write dataset ({exc})") from None
    print(f"{spec.count} images written to {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="bidiraam", description="Train and fit active appearance models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from annotated images")
    p.add_argument("images", help="directory of <stem>.pgm or <stem>.npy images")
    p.add_argument("landmarks", help="directory of matching <stem>.pts files")
    p.add_argument("--variance", type=float, default=0.95, help="retained shape variance (default 0.95)")
    p.add_argument("--appearance-variance", type=float, default=None,
                   help="retained appearance variance (default: --variance)")
    p.add_argument("--global", dest="global_kind", choices=("sim", "affine"), default="sim")
    p.add_argument("--mode", choices=("appended", "separate"), default="separate")
    p.add_argument("--out", required=True, help="model file to write (.npz)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="fit a model to one image")
    p.add_argument("model")
    p.add_argument("image")
    p.add_argument("init", help="initial landmarks (.pts)")
    p.add_argument("--algo", choices=("ica", "po", "sic"), default="sic")
    p.add_argument("--bi", action="store_true", help="bidirectional warping")
    p.add_argument("--global", dest="global_kind", choices=("sim", "affine"), default=None,
                   help="global transform (default: the model's)")
    p.add_argument("--constrain", action="store_true", help="clamp shape parameters to 3 sqrt(eigenvalue)")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True, help="fitted landmarks (.pts); report files are written beside it")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="run an experiment described by a run-config file")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="directory for cells.csv and summary.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic annotated dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--landmarks", type=int, default=24)
    p.add_argument("--shape-modes", type=int, default=3)
    p.add_argument("--shape-amplitude", type=float, default=3.0)
    p.add_argument("--texture-modes", type=int, default=2)
    p.add_argument("--texture-amplitude", type=float, default=0.15)
    p.add_argument("--distortion", choices=("none", "similarity", "affine"), default="similarity")
    p.add_argument("--rotation", type=float, default=10.0, help="max rotation, degrees")
    p.add_argument("--scale-jitter", type=float, default=0.1)
    p.add_argument("--shear", type=float, default=0.0)
    p.add_argument("--translation", type=float, default=4.0, help="max translation, pixels")
    p.add_argument("--noise", type=float, default=0.0, help="intensity noise standard deviation")
    p.add_argument("--size", type=int, default=128, help="image width and height")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
