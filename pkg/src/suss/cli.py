"""Command-line entry point: ``suss <subcommand> ...``.

Results go to stdout as JSON; diagnostics and errors go to stderr. Errors are
one JSON object ``{"kind": ..., "message": ...}`` with exit codes 2 (io),
3 (shape or validation) and 4 (numeric).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, augment, evalharness, score, supn, synthetic
from .fitting import FitConfig, FitError, fit_decomposition
from .imaging import (
    COMPONENTS,
    ImageDecodeError,
    ImageError,
    center_crop_to_multiple,
    decompose,
    load_image,
    save_image,
    ycbcr_to_rgb,
)

log = logging.getLogger("suss")

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    fit: FitConfig = field(default_factory=FitConfig)
    plans: tuple | None = None
    weights_path: str | None = None
    output_dir: str = "."

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ValueError("seed must be an integer")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ValueError("workers must be an integer >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"seed", "workers", "fit", "plans", "weights_path", "output_dir"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: d[k] for k in ("seed", "workers", "weights_path", "output_dir") if k in d}
        if "fit" in d:
            kw["fit"] = FitConfig.from_dict(d["fit"])
        if d.get("plans") is not None:
            plans = d["plans"]
            if not isinstance(plans, dict) or set(plans) - {"geometric", "color"}:
                raise ValueError('plans must be {"geometric": [...], "color": [...]}')
            kw["plans"] = (
                augment.AugmentationPlan.from_json(plans["geometric"]) if "geometric" in plans else None,
                augment.AugmentationPlan.from_json(plans["color"]) if "color" in plans else None,
            )
        return cls(**kw)

    def fit_key(self) -> str:
        """Hash of everything that affects a fit."""
        plans = None
        if self.plans is not None:
            plans = [p.to_json() if p is not None else None for p in self.plans]
        blob = json.dumps({"seed": self.seed, "fit": self.fit.to_dict(), "plans": plans}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- helpers --------------------------------------------------------------


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serialisable: {type(v).__name__}")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n")


def _read_image(path) -> np.ndarray:
    img = load_image(path)
    h, w = img.shape[:2]
    cropped = center_crop_to_multiple(img, 4)
    if cropped.shape != img.shape:
        log.warning("%s: %dx%d center-cropped to %dx%d", path, w, h, cropped.shape[1], cropped.shape[0])
    return cropped


def _output_dir(run: RunConfig) -> Path:
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def save_params_dir(params4, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, p in zip(COMPONENTS, params4):
        supn.save_supn(p, directory / f"{name}.supn")


def load_params_dir(directory) -> list:
    directory = Path(directory)
    params4 = []
    for name in COMPONENTS:
        path = directory / f"{name}.supn"
        if not path.is_file():
            raise CliError("io", f"{path}: missing container")
        p = supn.load_supn(path)
        if p.component and p.component != name:
            raise CliError("validation", f"{path}: holds component {p.component!r}, expected {name!r}")
        params4.append(p)
    return params4


def _cache_dir(image_path: Path, img: np.ndarray, run: RunConfig) -> Path:
    content = hashlib.sha256(np.ascontiguousarray(img).tobytes() + repr(img.shape).encode()).hexdigest()[:16]
    root = os.environ.get("SUSS_CACHE_DIR")
    base = Path(root) if root else image_path.parent / ".suss_cache"
    return base / f"{content}-{run.fit_key()}"


def fit_image(img: np.ndarray, run: RunConfig):
    """Fit and round to container precision, so cached and fresh fits agree."""
    params4, traces = fit_decomposition(img, run.plans, run.fit, seed=run.seed, workers=run.workers)
    return [supn.to_storage_precision(p) for p in params4], traces


def params_for_image(image_path, run: RunConfig, img=None):
    """Fitted params for a reference image, reusing the content-keyed cache."""
    image_path = Path(image_path)
    img = _read_image(image_path) if img is None else img
    cache = _cache_dir(image_path, img, run)
    if all((cache / f"{n}.supn").is_file() for n in COMPONENTS):
        log.info("using cached fit %s", cache)
        params4 = load_params_dir(cache)
    else:
        log.info("fitting %s", image_path)
        params4, _ = fit_image(img, run)
        save_params_dir(params4, cache)
    return with_exact_mean(params4, img, run)


def with_exact_mean(params4, img, run: RunConfig):
    """Swap the stored float32 means for the reference decomposition when the mean is frozen.

    A frozen mean is the decomposition itself, so this only removes storage rounding.
    """
    if not run.fit.freeze_mu:
        return params4
    return [p.with_arrays(mu=c) for p, c in zip(params4, decompose(img))]


def resolve_params(source, run: RunConfig):
    """``source`` is a directory of containers or a reference image."""
    source = Path(source)
    if source.is_dir():
        return load_params_dir(source)
    return params_for_image(source, run)


def resolve_weights(spec: str | None, run: RunConfig) -> score.ComponentWeights:
    spec = spec or run.weights_path or "uniform"
    if spec == "uniform":
        return score.ComponentWeights.uniform()
    if spec == "paper":
        return score.ComponentWeights.paper_base()
    path = Path(spec)
    if not path.is_file():
        raise CliError("io", f"{path}: weights file not found")
    try:
        return score.ComponentWeights.from_json(json.loads(path.read_text()))
    except (KeyError, json.JSONDecodeError) as exc:
        raise CliError("validation", f"{path}: bad weights file ({exc})") from exc


def _pool_map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -- subcommands ----------------------------------------------------------


def cmd_fit(args, run: RunConfig) -> int:
    img = _read_image(args.image)
    params4, traces = fit_image(img, run)
    out = _output_dir(run)
    save_params_dir(params4, out)
    payload = {
        "image": str(args.image),
        "size": [img.shape[1], img.shape[0]],
        "seed": run.seed,
        "fit": run.fit.to_dict(),
        "traces": dict(zip(COMPONENTS, (t.to_dict() for t in traces))),
    }
    _write_json(out / "trace.json", payload)
    _emit({"output_dir": str(out), "containers": [f"{n}.supn" for n in COMPONENTS], "trace": "trace.json"})
    return EXIT_OK


def _write_map(params4, cand, weights, path) -> dict:
    m = score.suss_map(params4, cand, weights)
    path = Path(path)
    save_image(score.map_to_display(m)[..., None], path)
    raw = path.with_suffix(".npy")
    np.save(raw, m.astype(np.float32))
    return {"map": str(path), "map_raw": str(raw), "map_max": float(m.max())}


def cmd_score(args, run: RunConfig) -> int:
    weights = resolve_weights(args.weights, run)
    params4 = resolve_params(args.reference, run)
    cand = _read_image(args.candidate)
    result = score.suss(params4, cand, weights).to_dict()
    result["max_total"] = score.max_score(params4, weights)
    result["weights"] = [float(w) for w in weights.w]
    if args.symmetric:
        ref_path = Path(args.reference_image or args.reference)
        if ref_path.is_dir():
            raise CliError("validation", "--symmetric with a params directory needs --reference-image")
        ref_img = _read_image(ref_path)
        cand_params = params_for_image(args.candidate, run, img=cand)
        back = score.suss(cand_params, ref_img, weights).total
        result["reverse_total"] = back
        result["symmetric_total"] = 0.5 * (result["total"] + back)
    if args.map:
        result.update(_write_map(params4, cand, weights, args.map))
    _emit(result)
    return EXIT_OK


def cmd_map(args, run: RunConfig) -> int:
    weights = resolve_weights(args.weights, run)
    params4 = resolve_params(args.reference, run)
    cand = _read_image(args.candidate)
    out = Path(args.out) if args.out else _output_dir(run) / "suss_map.png"
    _emit(_write_map(params4, cand, weights, out))
    return EXIT_OK


def _render_component(params4, plane: np.ndarray) -> np.ndarray:
    if plane.shape[-1] == 1:
        return plane
    # chroma is shown over the fitted quarter-scale luminance
    return ycbcr_to_rgb(params4[2].mu, plane)


def cmd_sample(args, run: RunConfig) -> int:
    params4 = resolve_params(args.reference, run)
    ci = COMPONENTS.index(args.component)
    params = params4[ci]
    out = _output_dir(run)
    payload = {"component": args.component, "count": args.count, "seed": run.seed}
    if args.ranked:
        ranked = supn.sample_ranked(params, args.count, run.seed)
        names = ("sample_min.png", "sample_median.png", "sample_max.png")
        for name, plane in zip(names, (ranked.lowest, ranked.median, ranked.highest)):
            save_image(_render_component(params4, plane), out / name)
        payload["images"] = list(names)
        payload["log_probs"] = dict(zip(("min", "median", "max"), ranked.log_probs))
    else:
        xs = supn.sample(params, run.seed, count=args.count)
        np.save(out / "samples.npy", xs)
        payload["samples"] = "samples.npy"
        payload["log_probs"] = [float(v) for v in np.atleast_1d(supn.log_prob(params, xs))]
    _write_json(out / "samples.json", payload)
    _emit(payload)
    return EXIT_OK


def cmd_augment(args, run: RunConfig) -> int:
    img = _read_image(args.image)
    family = augment.Family.parse(args.family)
    if not 0 <= args.level < augment.N_LEVELS:
        raise CliError("validation", f"level must lie in 0..{augment.N_LEVELS - 1}, got {args.level}")
    out = _output_dir(run)
    stem = Path(args.image).stem
    records = []
    for draw in range(args.count):
        spec = augment.sample_spec(family, args.level, augment.derive_seed(run.seed, family, args.level, draw))
        suffix = "" if args.count == 1 else f"_{draw}"
        name = f"{stem}_{family.value}_{args.level}{suffix}.png"
        save_image(augment.apply(img, spec), out / name)
        log.info("%s: %s", name, json.dumps(spec.to_json(), sort_keys=True))
        records.append({"image": name, "spec": spec.to_json()})
    _emit({"augmentations": records})
    return EXIT_OK


def _suss_logprobs(job):
    """Component log-probs of every candidate of one reference (a picklable work item)."""
    ref, candidates, run = job
    params4 = params_for_image(ref, run)
    return [score.component_logprobs(params4, _read_image(c)) for c in candidates]


def _triplet_logprobs(records, run: RunConfig, params_root=None):
    """Per-row (logp_p1, logp_p0), each (n, 4), grouped so each reference is fitted once."""
    if params_root is not None:
        out = []
        for r in records:
            params4 = load_params_dir(Path(params_root) / r.ref_path.stem)
            out.append([score.component_logprobs(params4, _read_image(c)) for c in (r.p1_path, r.p0_path)])
    else:
        out = _pool_map(_suss_logprobs, [(r.ref_path, (r.p1_path, r.p0_path), run) for r in records], run.workers)
    arr = np.asarray(out, dtype=np.float64)
    return arr[:, 0], arr[:, 1]


def cmd_fit_weights(args, run: RunConfig) -> int:
    if args.synthetic:
        y1, y0, h = synthetic.separable_triplets(n=args.synthetic_count, seed=run.seed)
        skipped = 0
    else:
        if not args.manifest:
            raise CliError("validation", "fit-weights needs a manifest or --synthetic")
        records = evalharness.load_triplet_manifest(args.manifest, strict=not args.lenient)
        skipped = records.skipped
        y1, y0 = _triplet_logprobs(records, run, args.params_root)
        h = np.array([r.h for r in records])
    fit = score.fit_weights(y1, y0, h, steps=args.steps)
    out = _output_dir(run)
    fit.weights.save(out / "weights.json")
    choices = score.predict_choices(y1, y0, fit.weights)
    _emit({
        "weights_file": str(out / "weights.json"),
        "log_w": [float(v) for v in fit.weights.log_w],
        "weights": [float(v) for v in fit.weights.w],
        "grid_log10_w": list(fit.grid_log10_w),
        "grid_bce": fit.grid_bce,
        "refined_bce": fit.refined_bce,
        "ln2": math.log(2.0),
        "twoafc": evalharness.twoafc_score(choices, h),
        "n": int(len(h)),
        "skipped": skipped,
    })
    return EXIT_OK


def _baseline_scores(metric, pairs):
    fn = evalharness.psnr if metric == "psnr" else evalharness.ssim
    return [fn(_read_image(a), _read_image(b)) for a, b in pairs]


def cmd_eval(args, run: RunConfig) -> int:
    orientation = args.orientation or 1
    if args.mode == "2afc":
        records = evalharness.load_triplet_manifest(args.manifest, strict=not args.lenient)
        if len(records) == 0:
            raise CliError("validation", f"{args.manifest}: no usable rows")
        h = np.array([r.h for r in records])
        if args.metric == "suss":
            weights = resolve_weights(args.weights, run)
            y1, y0 = _triplet_logprobs(records, run, args.params_root)
            s1, s0 = y1 @ weights.w, y0 @ weights.w
        else:
            s1 = np.array(_baseline_scores(args.metric, [(r.ref_path, r.p1_path) for r in records]))
            s0 = np.array(_baseline_scores(args.metric, [(r.ref_path, r.p0_path) for r in records]))
        s1, s0 = orientation * s1, orientation * s0
        choices = np.where(s1 > s0, 1.0, np.where(s1 < s0, 0.0, 0.5))
        report = {
            "mode": "2afc",
            "metric": args.metric,
            "orientation": orientation,
            "n": len(records),
            "skipped": records.skipped,
            "twoafc": evalharness.twoafc_score(choices, h),
            "twoafc_majority": evalharness.twoafc_majority(choices, h),
        }
    else:
        records = evalharness.load_mos_manifest(args.manifest, strict=not args.lenient)
        if len(records) == 0:
            raise CliError("validation", f"{args.manifest}: no usable rows")
        pairs = [(r.ref_path, r.dist_path) for r in records]
        if args.metric == "suss":
            weights = resolve_weights(args.weights, run)
            if args.params_root is not None:
                lps = [score.component_logprobs(load_params_dir(Path(args.params_root) / a.stem), _read_image(b))
                       for a, b in pairs]
            else:
                lps = [v[0] for v in _pool_map(_suss_logprobs, [(a, (b,), run) for a, b in pairs], run.workers)]
            scores = np.asarray(lps) @ weights.w
        else:
            scores = np.array(_baseline_scores(args.metric, pairs))
        report = evalharness.mos_report(scores, [r.mos for r in records], [r.category for r in records],
                                        orientation=orientation)
        report.update({"mode": "mos", "metric": args.metric, "skipped": records.skipped,
                       "kl_config": {"bins": evalharness.KL_BINS, "eps": evalharness.KL_EPS}})
    if run.output_dir != ".":
        _write_json(_output_dir(run) / "report.json", report)
    _emit(report)
    return EXIT_OK


def cmd_reconstruct(args, run: RunConfig) -> int:
    weights = resolve_weights(args.weights, run)
    params4 = resolve_params(args.reference, run)
    if args.init:
        init = _read_image(args.init)
    else:
        ref_path = Path(args.reference_image or args.reference)
        if ref_path.is_dir():
            raise CliError("validation", "reconstruct from a params directory needs --init or --reference-image")
        ref = _read_image(ref_path)
        rng = np.random.default_rng(run.seed)
        init = np.clip(ref + args.noise * rng.standard_normal(ref.shape), 0.0, 1.0)
    rec = score.reconstruct(params4, init, weights, steps=args.steps, lr=args.lr)
    out = _output_dir(run)
    save_image(rec.image, out / "reconstruction.png")
    np.save(out / "reconstruction.npy", rec.image)
    payload = {
        "image": "reconstruction.png",
        "score": rec.score,
        "initial_score": rec.trajectory[0],
        "max_total": score.max_score(params4, weights),
        "trajectory": rec.trajectory,
    }
    _write_json(out / "reconstruction.json", payload)
    _emit({k: v for k, v in payload.items() if k != "trajectory"})
    return EXIT_OK


# -- argument parsing -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="RunConfig JSON file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS)
    common.add_argument("--output-dir", default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="suss", description="Structured Uncertainty Similarity Score", parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=fn)
        return p

    def weights_opt(p):
        p.add_argument("--weights", help="weights JSON, 'uniform' (default) or 'paper'")

    p = add("fit", cmd_fit, "fit the four component Gaussians around an image")
    p.add_argument("image")

    p = add("score", cmd_score, "score a candidate against a reference")
    p.add_argument("reference", help="params directory or reference image (auto-fitted and cached)")
    p.add_argument("candidate")
    weights_opt(p)
    p.add_argument("--symmetric", action="store_true", help="also report the two-direction average")
    p.add_argument("--reference-image", help="reference image when REFERENCE is a params directory")
    p.add_argument("--map", help="write the per-pixel map PNG (plus a raw .npy) here")

    p = add("map", cmd_map, "write the per-pixel evidence map")
    p.add_argument("reference")
    p.add_argument("candidate")
    p.add_argument("--out")
    weights_opt(p)

    p = add("sample", cmd_sample, "draw samples from one fitted component")
    p.add_argument("reference")
    p.add_argument("--component", choices=COMPONENTS, default=COMPONENTS[0])
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--ranked", action="store_true", help="keep only the min, median and max log-prob samples")

    p = add("augment", cmd_augment, "apply one augmentation family at one level")
    p.add_argument("image")
    p.add_argument("--family", required=True, choices=[f.value for f in augment.ALL_FAMILIES])
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--count", type=int, default=1)

    p = add("fit-weights", cmd_fit_weights, "learn component weights from 2AFC judgments")
    p.add_argument("manifest", nargs="?", help="triplet CSV (ref,p0,p1,h)")
    p.add_argument("--synthetic", action="store_true", help="use the bundled separable triplet fixture")
    p.add_argument("--synthetic-count", type=int, default=1000)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--params-root", help="directory of per-reference params directories, named by image stem")
    p.add_argument("--lenient", action="store_true", help="skip rows with missing files")

    p = add("eval", cmd_eval, "evaluate a metric on a 2AFC or MOS manifest")
    p.add_argument("manifest")
    p.add_argument("--mode", choices=("2afc", "mos"), required=True)
    p.add_argument("--metric", choices=("suss", "psnr", "ssim"), default="suss")
    p.add_argument("--orientation", type=int, choices=(1, -1),
                   help="+1 if higher means more similar (default), -1 for distances")
    p.add_argument("--params-root")
    p.add_argument("--lenient", action="store_true")
    weights_opt(p)

    p = add("reconstruct", cmd_reconstruct, "maximise the score over pixels from a noisy start")
    p.add_argument("reference")
    p.add_argument("--init", help="initial image; default is the reference plus Gaussian noise")
    p.add_argument("--reference-image")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.01)
    weights_opt(p)
    return parser


def load_run_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError("io", f"{path}: config file not found")
        try:
            base = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError("validation", f"{path}: {exc}") from exc
        if not isinstance(base, dict):
            raise CliError("validation", f"{path}: config must be a JSON object")
    for key in ("seed", "workers", "output_dir"):
        if hasattr(args, key):
            base[key] = getattr(args, key)
    return RunConfig.from_dict(base)


def _error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"kind": kind, "message": message}) + "\n")
    return code


def _configure_logging(verbosity: int, command: str) -> None:
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    # the augment command always logs its drawn parameters
    if command == "augment":
        level = min(level, logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(getattr(args, "verbose", 0), args.command)
    try:
        run = load_run_config(args)
        return args.func(args, run)
    except CliError as exc:
        code = {"io": EXIT_IO, "numeric": EXIT_NUMERIC}.get(exc.kind, EXIT_VALIDATION)
        return _error(exc.kind, str(exc), code)
    except (ImageDecodeError, supn.SupnFormatError, evalharness.ManifestFileError, OSError) as exc:
        return _error("io", str(exc), EXIT_IO)
    except (ImageError, supn.ShapeError, score.ResolutionError) as exc:
        return _error("shape", str(exc), EXIT_VALIDATION)
    except (FitError, FloatingPointError) as exc:
        return _error("numeric", str(exc), EXIT_NUMERIC)
    except ValueError as exc:
        return _error("validation", str(exc), EXIT_VALIDATION)


if __name__ == "__main__":
    sys.exit(main())
