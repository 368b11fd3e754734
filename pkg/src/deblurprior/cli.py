"""Command-line entry point: synth | train | deblur | eval | classify.

Every command accepts ``--config FILE`` holding flat ``key = value`` lines whose
keys are long flag names (``iter-max = 5`` or ``iter_max = 5``); flags given on
the command line win. Each run writes a ``*.run.txt`` record of the resolved
settings, seed included, in the same format, so it can be replayed.

Exit codes: 0 ok, 2 usage or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import classifier, metrics, solver, synth
from .imaging import load_png, save_png, to_luma, write_text

log = logging.getLogger("deblurprior")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
# marks defaults that reproduce the reference method's published settings
REF = " [reference]"


class UsageError(Exception):
    pass


# --- config files --------------------------------------------------------------


def parse_config_text(text):
    """Flat ``key = value`` pairs; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise UsageError(f"config line {n}: empty key")
        out[key.replace("_", "-")] = value
    return out


def format_config(values):
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def _flag_actions(parser):
    """long flag name (without dashes) -> argparse action."""
    table = {}
    for a in parser._actions:
        for opt in a.option_strings:
            if opt.startswith("--") and opt not in ("--help", "--config"):
                table[opt[2:]] = a
    return table


def _convert(action, raw):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{action.option_strings[0]}: expected a boolean, got {raw!r}")
        on = low in ("true", "1", "yes")
        return on if isinstance(action, argparse._StoreTrueAction) else not on
    try:
        return action.type(raw) if action.type else raw
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{action.option_strings[0]}: {exc}") from None


def apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from an optional ``--config`` file."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            text = Path(known.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from None
        actions = _flag_actions(parser)
        defaults = {}
        for key, raw in parse_config_text(text).items():
            if key not in actions:
                raise UsageError(f"unknown config key {key!r} (known: {', '.join(sorted(actions))})")
            defaults[actions[key].dest] = _convert(actions[key], raw)
        parser.set_defaults(**defaults)
    return parser.parse_args(argv)


def run_record(parser, args):
    """Resolved settings keyed by long flag name, for ``*.run.txt``."""
    out = {}
    for name, action in sorted(_flag_actions(parser).items()):
        value = getattr(args, action.dest, None)
        if value is not None:
            out[name] = value
    return out


# --- argument definitions ------------------------------------------------------


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    def _get_help_string(self, action):
        # derived or absent defaults are described in the help text itself
        if action.default is None or action.default is False:
            return action.help
        return super()._get_help_string(action)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise ValueError(f"must be >= 1, got {v}")
    return v


def _add_common(p):
    p.add_argument("--config", help="flat key = value file of flag defaults")
    p.add_argument("--seed", type=int, default=0, help="random seed (recorded in the run log)")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")


def _add_solver_args(p):
    d = solver.SolverConfig()
    p.add_argument("--lambda", dest="lam", metavar="LAMBDA", type=float, default=d.lam, help="weight of the learned prior; 0 disables it" + REF)
    p.add_argument("--mu", type=float, default=d.mu, help="weight of the L0 gradient term" + REF)
    p.add_argument("--gamma", type=float, default=d.gamma, help="kernel L2 weight" + REF)
    p.add_argument("--eta", type=float, default=d.eta, help="gradient step size of the prior sub-problem" + REF)
    p.add_argument("--iter-max", type=_positive_int, default=d.iter_max, help="outer iterations per pyramid level" + REF)
    p.add_argument("--s-max", type=int, default=d.s_max, help="gradient steps per prior sub-problem" + REF)
    p.add_argument("--kernel-size", type=int, default=d.kernel_size, help="odd side of the estimated kernel")
    p.add_argument("--alpha-max", type=float, default=d.alpha_max, help="cap of the gradient penalty weight")
    p.add_argument("--beta-max", type=float, default=d.beta_max, help="cap of the prior penalty weight (eta * beta-max < 2)")
    p.add_argument("--penalty-growth", type=float, default=d.penalty_growth, help="factor applied to both penalty weights per inner step")
    p.add_argument("--pyramid-scale", type=float, default=d.pyramid_scale, help="scale between pyramid levels")
    p.add_argument("--restore-mu", type=float, default=d.restore_mu, help="L0 weight of the final non-blind restore")
    p.add_argument("--restore-iters", type=_positive_int, default=d.restore_iters, help="iterations of the final restore")
    p.add_argument("--kernel-threshold", type=float, default=d.kernel_threshold, help="prune kernel taps below this fraction of the peak")
    p.add_argument("--no-taper", action="store_true", help="skip edge tapering before FFT solves")
    p.add_argument("--single-level", action="store_true", help="estimate at full resolution only (no coarse-to-fine)")


def solver_config(args):
    kw = dict(
        lam=args.lam, mu=args.mu, gamma=args.gamma, eta=args.eta, iter_max=args.iter_max, s_max=args.s_max,
        kernel_size=args.kernel_size, alpha_max=args.alpha_max, beta_max=args.beta_max,
        penalty_growth=args.penalty_growth, pyramid_scale=args.pyramid_scale, restore_mu=args.restore_mu,
        restore_iters=args.restore_iters, kernel_threshold=args.kernel_threshold, taper=not args.no_taper,
        multiscale=not args.single_level,
    )
    return solver.SolverConfig(**kw)


def build_parser():
    """(top-level parser, {command: sub-parser})."""
    top = argparse.ArgumentParser(prog="deblurprior", description=__doc__, formatter_class=_Formatter)
    sub = top.add_subparsers(dest="command", required=True, metavar="COMMAND")

    t = classifier.TrainConfig()
    s = synth.SynthConfig()

    p = sub.add_parser("synth", help="generate a blurred/clear dataset", formatter_class=_Formatter)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--samples", type=_positive_int, default=2000, help="total samples, even: half clear, half blurred (reference: 100000)")
    p.add_argument("--kernels", type=_positive_int, default=40, help="number of random trajectory kernels (reference: 200)")
    p.add_argument("--kernel-min", type=int, default=s.kernel_min, help="smallest kernel side" + REF)
    p.add_argument("--kernel-max", type=int, default=s.kernel_max, help="largest kernel side" + REF)
    p.add_argument("--noise", type=float, default=s.noise_sigma, help="Gaussian noise sigma added to blurred samples" + REF)
    p.add_argument("--scenes", type=_positive_int, default=50, help="procedural clear source scenes (reference: 500 photos)")
    p.add_argument("--size", type=int, default=192, help="side of each procedural source scene")
    p.add_argument("--source", help="directory of clear PNGs to use instead of procedural scenes")
    p.add_argument("--crop", type=int, default=96, help="random crop side taken from a source for each pair (0: whole image)")
    _add_common(p)

    p = sub.add_parser("train", help="train the blur classifier", formatter_class=_Formatter)
    p.add_argument("--data", required=True, help="dataset directory (from synth)")
    p.add_argument("--out", required=True, help="output weights file")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--val-data", help="optional held-out dataset for per-epoch accuracy")
    p.add_argument("--epochs", type=_positive_int, default=30, help="training epochs")
    p.add_argument("--batch-size", type=_positive_int, default=t.batch_size, help="minibatch size" + REF)
    p.add_argument("--lr", type=float, default=t.lr, help="initial learning rate" + REF)
    p.add_argument("--momentum", type=float, default=t.momentum, help="SGD momentum" + REF)
    p.add_argument("--weight-decay", type=float, default=t.weight_decay, help="L2 weight decay" + REF)
    p.add_argument("--lr-decay-factor", type=float, default=t.lr_decay_factor, help="learning-rate divisor per decay step" + REF)
    p.add_argument("--lr-decay-every", type=_positive_int, default=t.lr_decay_every, help="epochs between decay steps" + REF)
    p.add_argument("--patch", type=_positive_int, default=t.patch, help="training crop side" + REF)
    p.add_argument("--min-scale", type=float, default=t.rescale_range[0], help="smallest random batch rescale" + REF)
    p.add_argument("--no-multiscale", action="store_true", help="train at native scale only (baseline)")
    _add_common(p)

    p = sub.add_parser("deblur", help="blind deblurring of one PNG", formatter_class=_Formatter)
    p.add_argument("input", help="blurred PNG (grayscale or RGB)")
    p.add_argument("--model", help="classifier weights (required when lambda > 0)")
    p.add_argument("--out", required=True, help="restored PNG")
    p.add_argument("--kernel-out", help="kernel PNG preview (default: <out stem>.kernel.png; .txt written alongside)")
    p.add_argument("--diagnostics", help="per-iteration CSV (default: <out stem>.diag.csv)")
    p.add_argument("--dump", help="directory for per-level kernels and latent images")
    _add_solver_args(p)
    _add_common(p)

    p = sub.add_parser("eval", help="deblur a dataset and report metrics", formatter_class=_Formatter)
    p.add_argument("--data", required=True, help="dataset directory (from synth)")
    p.add_argument("--model", help="classifier weights (required when lambda > 0)")
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N blurred samples (0: all)")
    p.add_argument("--workers", type=_positive_int, default=1, help="parallel deblurring processes")
    _add_solver_args(p)
    _add_common(p)

    p = sub.add_parser("classify", help="print f(image), the blur probability", formatter_class=_Formatter)
    p.add_argument("input", help="PNG image")
    p.add_argument("--model", required=True, help="classifier weights")
    _add_common(p)
    return top, dict(sub.choices)


# --- commands ------------------------------------------------------------------


def _require_file(path, what):
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _load_model(path, lam):
    if not lam:
        return classifier.Model.load(path) if path else None
    _require_file(path, "model")
    return classifier.Model.load(path)


def cmd_synth(args):
    rng = np.random.default_rng(args.seed)
    cfg = synth.SynthConfig(args.kernel_min, args.kernel_max, args.noise, args.crop or None)
    if args.samples % 2:
        raise UsageError(f"--samples must be even, got {args.samples}")
    if args.source:
        src = Path(args.source)
        if not src.is_dir():
            raise UsageError(f"source directory not found: {src}")
        files = sorted(src.glob("*.png"))
        if not files:
            raise UsageError(f"no PNG files in {src}")
        clear = [to_luma(load_png(f)) for f in files]
    else:
        if args.size < classifier.MIN_SIZE:
            raise UsageError(f"--size must be >= {classifier.MIN_SIZE}")
        clear = [synth.procedural_scene(args.size, rng) for _ in range(args.scenes)]
    ds = synth.generate_dataset(clear, args.kernels, args.samples, cfg, rng)
    synth.write_dataset(ds, args.out)
    n_blur = sum(s.label for s in ds)
    print(f"wrote {len(ds)} samples ({len(ds) - n_blur} clear, {n_blur} blurred) and {len(ds.kernels)} kernels to {args.out}")
    return Path(args.out) / "synth.run.txt"


def cmd_train(args):
    for d in (args.data, args.val_data):
        if d is not None and not (Path(d) / synth.MANIFEST).is_file():
            raise UsageError(f"dataset not found (no {synth.MANIFEST}): {d}")
    ds = synth.read_dataset(args.data)
    val = synth.read_dataset(args.val_data) if args.val_data else None
    lo = 1.0 if args.no_multiscale else args.min_scale
    cfg = classifier.TrainConfig(
        batch_size=args.batch_size, momentum=args.momentum, weight_decay=args.weight_decay, lr=args.lr,
        lr_decay_factor=args.lr_decay_factor, lr_decay_every=args.lr_decay_every, patch=args.patch,
        rescale_range=(lo, 1.0),
    )
    model = classifier.build_model(args.seed)
    result = classifier.train(model, ds, cfg, args.epochs, seed=args.seed, val_set=val)
    model.save(args.out)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ("epoch", "lr", "mean_loss", "train_acc", "val_acc")
    w.writerow(cols + ("seed",))
    for row in result.history:
        w.writerow([row["epoch"]] + [f"{row[c]:.6g}" for c in cols[1:]] + [args.seed])
    write_text(args.log or f"{args.out}.log.csv", buf.getvalue())
    last = result.history[-1]
    print(f"trained {args.epochs} epochs: loss {last['mean_loss']:.4f} train_acc {last['train_acc']:.3f}; weights -> {args.out}")
    return Path(f"{args.out}.run.txt")


DIAG_COLUMNS = ("level", "iter", "alpha", "beta", "energy", "f_value")


def diagnostics_csv(diag, seed):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DIAG_COLUMNS + ("seed",))
    for r in diag.rows:
        w.writerow([r["level"], r["iter"]] + [f"{r[c]:.10g}" for c in DIAG_COLUMNS[2:]] + [seed])
    return buf.getvalue()


def _stem(path):
    p = Path(path)
    return p.with_name(p.stem)


def cmd_deblur(args):
    _require_file(args.input, "input image")
    cfg = solver_config(args)
    model = _load_model(args.model, cfg.lam)
    blurred = load_png(args.input)
    restored, k, diag = solver.blind_deblur(blurred, model, cfg, dump=bool(args.dump))
    save_png(args.out, restored)
    kernel_png = args.kernel_out or f"{_stem(args.out)}.kernel.png"
    save_png(kernel_png, k / k.max())
    write_text(f"{_stem(kernel_png)}.txt", synth.format_kernel(k))
    write_text(args.diagnostics or f"{_stem(args.out)}.diag.csv", diagnostics_csv(diag, args.seed))
    if args.dump:
        dump = Path(args.dump)
        for lvl, kk in diag.kernels:
            save_png(dump / f"kernel_L{lvl}.png", kk / kk.max())
            write_text(dump / f"kernel_L{lvl}.txt", synth.format_kernel(kk))
        for lvl, it, img in diag.latents:
            save_png(dump / f"latent_L{lvl}_it{it}.png", img)
    print(f"restored -> {args.out}; kernel {k.shape[0]}x{k.shape[1]} -> {kernel_png}")
    return Path(f"{args.out}.run.txt")


def _eval_one(job):
    """Deblur one blurred sample and compute its metrics row (runs in workers)."""
    name, blurred, clear, k_true, model_path, cfg = job
    model = classifier.Model.load(model_path) if model_path else None
    row = {"name": name}
    flags = []
    try:
        restored, k, diag = solver.blind_deblur(blurred, model, cfg)
    except (ValueError, classifier.ImageSizeError) as exc:
        row["flag"] = f"failed: {exc}"
        return row
    energies = diag.finest_energies()
    row["final_energy"] = energies[-1] if energies else float("nan")
    if model is not None:
        row["f_blurred"] = classifier.f(model, blurred)
        if clear is not None:
            row["f_clear"] = classifier.f(model, clear)
    border = k.shape[0] // 2
    if clear is None:
        flags.append("no_clear")
    else:
        row["psnr_blurred"] = metrics.psnr(clear, blurred, border)
        row["psnr_restored"] = metrics.psnr(clear, restored, border)
    if k_true is None:
        flags.append("no_kernel")
    else:
        row["kernel_similarity"] = metrics.kernel_similarity(k_true, k)
        if clear is not None:
            reference = solver.final_restore(blurred, k_true, cfg)
            row["error_ratio"] = metrics.error_ratio(restored, reference, clear)
    row["flag"] = ";".join(flags)
    return row


def cmd_eval(args):
    if not (Path(args.data) / synth.MANIFEST).is_file():
        raise UsageError(f"dataset not found (no {synth.MANIFEST}): {args.data}")
    cfg = solver_config(args)
    if cfg.lam:
        _require_file(args.model, "model")
    rows = synth.read_manifest(args.data)
    blurred = [r for r in rows if r["label"] == 1]
    if args.limit:
        blurred = blurred[: args.limit]
    if not blurred:
        raise UsageError(f"no blurred samples in {args.data}")
    clear_by_pair = {r["pair_id"]: r["path"] for r in rows if r["label"] == 0 and r["pair_id"] is not None}
    root = Path(args.data)
    jobs = []
    for r in blurred:
        clear_path = clear_by_pair.get(r["pair_id"])
        clear = to_luma(load_png(root / clear_path)) if clear_path and (root / clear_path).is_file() else None
        k_true = synth.read_kernel(root, r["kernel_id"]) if r["kernel_id"] is not None else None
        jobs.append((r["path"], to_luma(load_png(root / r["path"])), clear, k_true, args.model if cfg.lam else None, cfg))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_eval_one, jobs))
    else:
        results = [_eval_one(j) for j in jobs]
    report = metrics.EvalReport()
    for row in results:
        report.add(**row)
    write_text(args.out, report.to_csv())
    agg = report.aggregates()
    print(
        f"evaluated {len(results)} images: psnr {agg['psnr_blurred']:.2f} -> {agg['psnr_restored']:.2f} dB, "
        f"kernel similarity {agg['kernel_similarity']:.3f}; report -> {args.out}"
    )
    return Path(f"{args.out}.run.txt")


def cmd_classify(args):
    _require_file(args.input, "input image")
    _require_file(args.model, "model")
    model = classifier.Model.load(args.model)
    value = classifier.f(model, to_luma(load_png(args.input)))
    print(f"{value:.6f}")
    return None


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "deblur": cmd_deblur, "eval": cmd_eval, "classify": cmd_classify}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    top, subs = build_parser()
    try:
        if not argv or argv[0] not in subs:
            top.parse_args(argv)  # prints usage or help, then exits
        sub = subs[argv[0]]
        args = apply_config(sub, argv[1:])
        args.command = argv[0]
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        record = COMMANDS[args.command](args)
        if record is not None:
            write_text(record, format_config(run_record(sub, args)))
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report any other failure as a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
