"""Command-line interface.

Exit codes: 0 success, 1 numeric-check failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .gmm import fit_gmm_patches
from .imaging import ImageIOError, load_image, save_image
from .metrics import psnr, ssim
from .modelio import (ModelFileError, load_gmm, load_model, read_manifest, save_gmm, save_model,
                      write_manifest)
from .network import CONVENTIONS, AuditUnavailableError, energy_grad_check, network_forward, zero_network
from .prior import PriorParams
from .recovery import (RecoveryConfig, pipeline_dcp, pipeline_dehaze, pipeline_derain,
                       pipeline_underwater)
from .separation import SeparationOptions
from .synth import SYNTH_KINDS, HazeRecipe, make_sources, rain_streaks, synth_hazy, synthesize
from .synth import procedural_depth, procedural_scene
from .training import MODES, FitOptions, NetworkShape, TrainingPair, gradient_check, train_schedule

log = logging.getLogger("dpatn")

OUTPUT_ENV = "DPATN_OUTPUT_DIR"
EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
_LOCK = ".dpatn.lock"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _default_out(command):
    base = os.environ.get(OUTPUT_ENV)
    return Path(base) / command if base else Path("dpatn-out") / command


@contextmanager
def output_dir(path, overwrite=False):
    """Claim an output directory; reject non-empty ones and concurrent users."""
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise UsageError(f"output path {path} exists and is not a directory")
    if path.is_dir() and any(p.name != _LOCK for p in path.iterdir()) and not overwrite:
        raise UsageError(f"output directory {path} is not empty (use --overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    lock = path / _LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise UsageError(f"output directory {path} is in use by another run") from exc
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield path
    finally:
        lock.unlink(missing_ok=True)


def write_table(rows, path):
    """List of flat dicts as CSV (header from the first row's keys)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [])
        writer.writeheader()
        writer.writerows(rows)
    return path


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def emit(pairs):
    """Tab-delimited key/value lines on stdout."""
    for key, value in pairs:
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"{key}\t{value}")


def _load_rgb(path, what="input"):
    img = load_image(path)
    if img.ndim != 3:
        raise UsageError(f"{what} {path} is not an RGB image")
    return img


def _model(arg):
    # "prior" selects the parameter-free network (propagation reduces to the prior map)
    if arg == "prior":
        return zero_network(1)
    return load_model(arg)


def _prior(args):
    return PriorParams(args.alpha_hat, args.alpha_check, args.window)


def _sep_opts(args):
    return SeparationOptions(args.mu_l, args.mu_p, args.eta, args.sep_iters, args.sep_tol, args.certify_iters)


def _metrics(out, gt):
    return {"psnr": psnr(out, gt), "ssim": ssim(out, gt)}


def _save_certificate(report, out):
    from .plotting import plot_certificate

    rows = [{"k": k, **dict(zip(report.COLUMNS, d.tolist())),
             "mu_l": float(report.mu_l[k]), "mu_p": float(report.mu_p[k])}
            for k, d in enumerate(report.diffs)]
    write_table(rows, out / "convergence.csv")
    plot_certificate(report, out / "convergence.png")


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    sources = make_sources(args.sources, args.source_size, args.seed)
    with output_dir(args.out, args.overwrite) as out:
        records = synthesize(sources, args.pairs, args.seed, args.crop, args.kind)
        for sub in ("obs", "trans", "clean"):
            (out / sub).mkdir(exist_ok=True)
        rows, clean_rows, table = [], [], []
        for i, r in enumerate(records):
            name = f"{i:04d}.png"
            save_image(r["observation"], out / "obs" / name, bits=16)
            save_image(r["transmission"], out / "trans" / name, bits=16)
            save_image(r["clean"], out / "clean" / name, bits=16)
            rows.append((f"obs/{name}", f"trans/{name}"))
            clean_rows.append((f"obs/{name}", f"clean/{name}"))
            table.append({"index": i, **{k: json.dumps(v) if isinstance(v, tuple) else v
                                          for k, v in r["recipe"].items()}})
        write_manifest(rows, out / "manifest.txt")
        write_manifest(clean_rows, out / "manifest_clean.txt")
        write_table(table, out / "recipes.csv")
    emit([("pairs", len(records)), ("kind", args.kind), ("manifest", out / "manifest.txt")])
    return EXIT_OK


def _training_pairs(manifest):
    pairs = []
    for obs_path, t_path in read_manifest(manifest):
        obs = _load_rgb(obs_path, "observation")
        t = load_image(t_path)
        if t.ndim != 2:
            raise UsageError(f"target {t_path} is not a grayscale transmission map")
        pairs.append(TrainingPair(obs, t))
    return pairs


def cmd_train(args):
    from .plotting import plot_losses

    pairs = _training_pairs(args.manifest)
    shape = NetworkShape(args.stages, args.filters, args.kernel, args.controls, args.convention,
                         not args.untied, args.lambda_init, args.filter_scale)
    opts = FitOptions(memory=args.memory, max_iter=args.max_iter, tol=args.tol)
    with output_dir(args.out, args.overwrite) as out:
        params, reports = train_schedule(pairs, shape, args.mode, opts, _prior(args))
        meta = {"mode": args.mode, "pairs": len(pairs), "n_params": params.n_params()}
        save_model(params, out / "model.json", meta)
        write_json({"shape": meta, "fits": [r.as_dict() for r in reports]}, out / "fit.json")
        write_table([{"fit": i, "iteration": k, "loss": v}
                     for i, r in enumerate(reports) for k, v in enumerate(r.losses)], out / "fit.csv")
        plot_losses(reports, out / "loss.png")
    final = reports[-1]
    emit([("n_params", params.n_params()), ("final_loss", float(final.losses[-1])),
          ("iterations", sum(r.iterations for r in reports)),
          ("line_search_failed", any(r.line_search_failed for r in reports)),
          ("model", out / "model.json")])
    return EXIT_OK


def _finish_restoration(out, name_images, gt, restored, fig_title):
    from .plotting import plot_maps

    for name, img in name_images:
        save_image(img, out / name, bits=8)
    metrics = {}
    if gt is not None:
        if gt.shape != restored.shape:
            raise UsageError(f"ground truth shape {gt.shape} differs from output {restored.shape}")
        metrics = _metrics(restored, gt)
        write_json(metrics, out / "metrics.json")
        write_table([metrics], out / "metrics.csv")
    plot_maps([img for _, img in name_images], [n.rsplit(".", 1)[0] for n, _ in name_images],
              out / "overview.png")
    return metrics


def cmd_dehaze(args):
    img = _load_rgb(args.input)
    gt = _load_rgb(args.gt, "ground truth") if args.gt else None
    model = _model(args.model)
    cfg = RecoveryConfig(args.epsilon)
    with output_dir(args.out, args.overwrite) as out:
        J, t, A = pipeline_dehaze(img, model, _prior(args), cfg)
        metrics = _finish_restoration(out, [("input.png", img), ("J.png", J), ("t.png", t)], gt, J, "dehaze")
    emit([("airlight", " ".join(f"{a:.6g}" for a in A)), *metrics.items(), ("output", out / "J.png")])
    return EXIT_OK


def cmd_underwater(args):
    img = _load_rgb(args.input)
    gt = _load_rgb(args.gt, "ground truth") if args.gt else None
    model = _model(args.model)
    cfg = RecoveryConfig(args.epsilon)
    with output_dir(args.out, args.overwrite) as out:
        J, t_rgb, B, report = pipeline_underwater(img, model, _prior(args), _sep_opts(args), cfg,
                                                  separate=not args.no_separation, tau=args.tau)
        metrics = _finish_restoration(out, [("input.png", img), ("J.png", J), ("t.png", t_rgb)], gt, J,
                                      "underwater")
        means = J.reshape(-1, 3).mean(axis=0)
        summary = {"background": B, "channel_means": means,
                   "channel_disparity": float(means.max() - means.min()), **metrics}
        if report is not None:
            summary["separation"] = report.as_dict()
            _save_certificate(report, out)
        write_json(summary, out / "summary.json")
    lines = [("background", " ".join(f"{b:.6g}" for b in B)),
             ("channel_disparity", summary["channel_disparity"]), *metrics.items()]
    if report is not None:
        lines += [("iterations", report.iterations), ("certificate", report.status)]
    emit(lines + [("output", out / "J.png")])
    return EXIT_OK


def cmd_derain(args):
    img = _load_rgb(args.input)
    gt = _load_rgb(args.gt, "ground truth") if args.gt else None
    model = _model(args.model)
    gmm = load_gmm(args.gmm)
    cfg = RecoveryConfig(args.epsilon)
    with output_dir(args.out, args.overwrite) as out:
        J, rain, t, report = pipeline_derain(img, model, gmm, _prior(args), _sep_opts(args), cfg,
                                             tau=args.tau, stride=args.stride)
        metrics = _finish_restoration(out, [("input.png", img), ("J.png", J), ("rain.png", rain),
                                            ("t.png", t)], gt, J, "derain")
        _save_certificate(report, out)
        write_json({"separation": report.as_dict(), **metrics}, out / "summary.json")
    emit([*metrics.items(), ("iterations", report.iterations), ("certificate", report.status),
          ("output", out / "J.png")])
    return EXIT_OK


def cmd_fit_gmm(args):
    if args.inputs:
        samples = []
        for p in args.inputs:
            f = load_image(p)
            samples.extend([f] if f.ndim == 2 else [f[:, :, c] for c in range(f.shape[2])])
    else:
        samples = [rain_streaks(args.size, args.size, args.angle, seed=args.seed + i)
                   for i in range(args.samples)]
    with output_dir(args.out, args.overwrite) as out:
        model = fit_gmm_patches(samples, args.patch, args.components, args.iters, args.seed, args.stride)
        save_gmm(model, out / "gmm.json")
        write_table([{"iteration": i, "log_likelihood": v} for i, v in enumerate(model.log_likelihood)],
                    out / "loglik.csv")
    emit([("components", model.n_components), ("patch", model.patch),
          ("log_likelihood", float(model.log_likelihood[-1]) if model.log_likelihood else float("nan")),
          ("gmm", out / "gmm.json")])
    return EXIT_OK


def cmd_eval(args):
    from .plotting import plot_psnr_bars

    model = _model(args.model)
    prior = _prior(args)
    cfg = RecoveryConfig(args.epsilon)
    rows = read_manifest(args.manifest)
    if args.limit:
        rows = rows[:args.limit]
    methods = {
        "model": lambda x: pipeline_dehaze(x, model, prior, cfg)[0],
        "prior": lambda x: pipeline_dehaze(x, zero_network(1), prior, cfg)[0],
        "dcp": lambda x: pipeline_dcp(x, prior, cfg)[0],
    }
    with output_dir(args.out, args.overwrite) as out:
        table = []
        for obs_path, gt_path in rows:
            obs = _load_rgb(obs_path, "observation")
            gt = _load_rgb(gt_path, "ground truth")
            for name, fn in methods.items():
                table.append({"image": Path(obs_path).name, "method": name, **_metrics(fn(obs), gt)})
        summary = {name: {"psnr": float(np.mean([r["psnr"] for r in table if r["method"] == name])),
                          "ssim": float(np.mean([r["ssim"] for r in table if r["method"] == name]))}
                   for name in methods}
        write_table(table, out / "eval.csv")
        write_json({"images": len(rows), "mean": summary}, out / "eval.json")
        plot_psnr_bars({n: [r["psnr"] for r in table if r["method"] == n] for n in methods}, out / "psnr.png")
    emit([(f"{name}_{k}", v) for name, m in summary.items() for k, v in m.items()])
    return EXIT_OK


def cmd_audit(args):
    model = load_model(args.model)
    rng = np.random.default_rng(args.seed)
    size = 16
    clean = procedural_scene(size, size, int(rng.integers(2**31)))
    depth = procedural_depth("perlin-like", size, size, int(rng.integers(2**31)))
    obs, t = synth_hazy(clean, depth, HazeRecipe(crop=None))
    pair = TrainingPair(obs, t)
    _, trace = network_forward(obs, model)
    results = []
    for l, stage in enumerate(model.stages):
        try:
            chk = energy_grad_check(trace[l], stage, args.pixels, seed=args.seed)
        except AuditUnavailableError:
            results.append({"check": f"energy_stage_{l}", "status": "skipped",
                            "max_rel_error": "", "max_abs_error": ""})
            continue
        ok = chk["max_rel_error"] <= args.tol
        results.append({"check": f"energy_stage_{l}", "status": "pass" if ok else "fail",
                        "max_rel_error": chk["max_rel_error"], "max_abs_error": chk["max_abs_error"]})
    n = model.n_params()
    coords = None if args.coords == 0 or args.coords >= n else np.sort(rng.choice(n, args.coords, replace=False))
    chk = gradient_check(pair, model, coords=coords)
    ok = chk["max_rel_error"] <= args.tol
    results.append({"check": "backprop", "status": "pass" if ok else "fail",
                    "max_rel_error": chk["max_rel_error"], "max_abs_error": chk["max_abs_error"]})
    failed = [r for r in results if r["status"] == "fail"]
    with output_dir(args.out, args.overwrite) as out:
        write_table(results, out / "audit.csv")
        write_json({"tolerance": args.tol, "checked_coords": int(chk["coords"].size),
                    "results": results, "passed": not failed}, out / "audit.json")
    for r in results:
        print(f"{r['check']}\t{r['status']}\t{r['max_rel_error']}")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def _add_common(p, command):
    p.add_argument("--out", type=Path, default=None,
                   help=f"output directory (default: ${OUTPUT_ENV}/{command} or ./dpatn-out/{command})")
    p.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty output directory")
    p.add_argument("--config", type=Path, default=None, help="JSON file of option defaults; flags override")
    p.add_argument("--seed", type=int, default=0)


def _add_prior(p):
    g = p.add_argument_group("prior")
    g.add_argument("--alpha-hat", type=float, default=PriorParams.alpha_hat)
    g.add_argument("--alpha-check", type=float, default=PriorParams.alpha_check)
    g.add_argument("--window", type=int, default=PriorParams.window, help="airlight min-filter window")
    g.add_argument("--epsilon", type=float, default=RecoveryConfig.epsilon)


def _add_separation(p, tau):
    g = p.add_argument_group("separation")
    g.add_argument("--mu-l", type=_positive_float, default=SeparationOptions.mu_l)
    g.add_argument("--mu-p", type=_positive_float, default=SeparationOptions.mu_p)
    g.add_argument("--eta", type=float, default=SeparationOptions.eta)
    g.add_argument("--sep-iters", type=_positive_int, default=SeparationOptions.max_iter)
    g.add_argument("--sep-tol", type=_positive_float, default=SeparationOptions.tol)
    g.add_argument("--certify-iters", type=int, default=0,
                   help="keep iterating to this count so the certificate sees a full window")
    g.add_argument("--tau", type=_positive_float, default=tau, help="gradient truncation threshold")


def build_parser():
    parser = argparse.ArgumentParser(prog="dpatn", description="Prior-aware transmission propagation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic paired dataset and manifest")
    _add_common(p, "synth")
    p.add_argument("--pairs", type=_positive_int, default=50)
    p.add_argument("--kind", choices=SYNTH_KINDS, default="haze")
    p.add_argument("--crop", type=_positive_int, default=180)
    p.add_argument("--sources", type=_positive_int, default=20, help="number of procedural source scenes")
    p.add_argument("--source-size", type=_positive_int, default=200)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a propagation network to a manifest of pairs")
    _add_common(p, "train")
    _add_prior(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--mode", choices=MODES, default="greedy_then_joint")
    p.add_argument("--stages", type=_positive_int, default=NetworkShape.n_stages)
    p.add_argument("--filters", type=_positive_int, default=NetworkShape.n_filters)
    p.add_argument("--kernel", type=_positive_int, default=NetworkShape.kernel_size)
    p.add_argument("--controls", type=_positive_int, default=NetworkShape.n_controls)
    p.add_argument("--convention", choices=CONVENTIONS, default=NetworkShape.convention)
    p.add_argument("--untied", action="store_true", help="learn the input filters separately")
    p.add_argument("--lambda-init", type=float, default=NetworkShape.lambda_p)
    p.add_argument("--filter-scale", type=float, default=NetworkShape.filter_scale)
    p.add_argument("--max-iter", type=_positive_int, default=FitOptions.max_iter)
    p.add_argument("--tol", type=_positive_float, default=FitOptions.tol)
    p.add_argument("--memory", type=_positive_int, default=FitOptions.memory)
    p.set_defaults(func=cmd_train)

    for name, helptext in (("dehaze", "dehaze one image"), ("underwater", "restore an underwater image"),
                           ("derain", "remove rain streaks, then dehaze")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p, name)
        _add_prior(p)
        p.add_argument("input", type=Path)
        p.add_argument("--model", required=True, help="model file, or 'prior' for the parameter-free network")
        p.add_argument("--gt", type=Path, default=None, help="clean reference for PSNR/SSIM")
        if name == "underwater":
            _add_separation(p, 0.01)
            p.add_argument("--no-separation", action="store_true", help="skip layer separation and color balance")
        if name == "derain":
            _add_separation(p, 0.08)
            p.add_argument("--gmm", type=Path, required=True)
            p.add_argument("--stride", type=_positive_int, default=1, help="patch stride of the GMM operator")
        p.set_defaults(func={"dehaze": cmd_dehaze, "underwater": cmd_underwater, "derain": cmd_derain}[name])

    p = sub.add_parser("fit-gmm", help="fit a patch GMM to rain-layer images or synthetic streaks")
    _add_common(p, "fit-gmm")
    p.add_argument("inputs", nargs="*", type=Path, help="rain-layer images (default: synthetic streak layers)")
    p.add_argument("--patch", type=int, default=7)
    p.add_argument("--components", type=_positive_int, default=3)
    p.add_argument("--iters", type=_positive_int, default=50)
    p.add_argument("--stride", type=_positive_int, default=1)
    p.add_argument("--samples", type=_positive_int, default=8)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--angle", type=float, default=75.0)
    p.set_defaults(func=cmd_fit_gmm)

    p = sub.add_parser("eval", help="compare a model with the prior-only and dark-channel baselines")
    _add_common(p, "eval")
    _add_prior(p)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", type=Path, required=True, help="observation / clean-image pairs")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="finite-difference audits of a model file")
    _add_common(p, "audit")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--pixels", type=_positive_int, default=100)
    p.add_argument("--coords", type=int, default=200, help="parameter coordinates to check (0 = all)")
    p.add_argument("--tol", type=_positive_float, default=1e-4)
    p.set_defaults(func=cmd_audit)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from --config; unknown keys are usage errors."""
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sub = next(a for a in parser._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub.choices[args.command]
    known = {a.dest for a in subparser._actions} - {"help", "config", "func"}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    subparser.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except UsageError as exc:
        print(f"dpatn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None:
        args.out = _default_out(args.command)
    try:
        return args.func(args)
    except (UsageError, ImageIOError, ModelFileError, FileNotFoundError) as exc:
        print(f"dpatn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"dpatn {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
