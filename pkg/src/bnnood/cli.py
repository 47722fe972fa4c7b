"""``bnnood`` command line: train, eval, ood-detect, grid, gen-ood.

Exit codes: 0 success, 2 usage or configuration problem, 3 numerical abort.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import data, grid, metrics
from .config import ConfigError, load_config, parse_value
from .errors import BnnoodError, ConfigurationError, TrainingAbort, UsageError
from .inference import LaplaceConfig, TrainConfig, VbConfig, fit_laplace, fit_vb, train_map, \
    write_trace
from .likelihoods import LikelihoodSpec
from .models import Posterior, expand_none_class, init_mlp, load_model, predict, save_model

log = logging.getLogger("bnnood")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _kv(text):
    out = {}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise UsageError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_data(spec):
    """Dataset from a spec string.

    ``toy[:seed=S,n=N,std=V]``, ``uniform:low=A,high=B,dim=D,n=N,seed=S``,
    ``ring:rmin=A,rmax=B,n=N,seed=S``, ``csv:PATH``,
    ``idx:IMAGES[,LABELS]``.
    """
    kind, _, rest = spec.partition(":")
    try:
        if kind == "toy":
            kw = _kv(rest)
            return data.gen_toy_gaussians(data.ToyGaussians(
                seed=int(kw.get("seed", 0)), n_per_class=int(kw.get("n", 100)),
                std=float(kw.get("std", 0.35))))
        if kind == "uniform":
            kw = _kv(rest)
            return data.gen_uniform_ood(float(kw.get("low", -6)), float(kw.get("high", 6)),
                                        int(kw.get("dim", 2)), int(kw.get("n", 1000)),
                                        int(kw.get("seed", 0)))
        if kind == "ring":
            kw = _kv(rest)
            return data.gen_ring(float(kw.get("rmin", 8)), float(kw.get("rmax", 12)),
                                 int(kw.get("n", 1000)), int(kw.get("seed", 0)))
        if kind == "csv":
            return data.load_csv(rest)
        if kind == "idx":
            paths = rest.split(",")
            return data.load_idx(paths[0], paths[1] if len(paths) > 1 else None)
    except ValueError as exc:
        if isinstance(exc, BnnoodError):
            raise
        raise UsageError(f"bad data spec {spec!r}: {exc}") from None
    raise UsageError(f"unknown data spec {spec!r}")


def _n_classes(D):
    if D.n_classes is not None:
        return D.n_classes
    return int(D.y.max()) + 1


def _real_classes(model, D=None, classes=None):
    """Class count excluding a none class, or None when the model has no none class."""
    if classes is None and D is not None and D.is_hard and len(D):
        classes = int(D.y.max()) + 1
    if classes is not None and model.n_out == classes + 1:
        return classes
    return None


def _ood_set(cfg, D):
    kind = cfg.ood
    if kind == "none":
        return None
    n = cfg.ood_n or len(D)
    if kind == "uniform":
        image = D.X.min() >= 0 and D.X.max() <= 1 and D.dim > 2
        low = cfg.ood_low if cfg.ood_low is not None else (0.0 if image else -6.0)
        high = cfg.ood_high if cfg.ood_high is not None else (1.0 if image else 6.0)
        return data.gen_uniform_ood(low, high, D.dim, n, cfg.ood_seed)
    if kind == "smooth":
        src = D.subset(np.arange(min(n, len(D))))
        return data.gen_smooth_ood(src, data.SmoothNoise(seed=cfg.ood_seed))
    out = load_data(kind)
    return data.LabeledSet(out.X, origin="out")


def cmd_train(args):
    cfg = load_config(args.config)
    for key in ("method", "likelihood", "ood", "seed"):
        value = getattr(args, key)
        if value is not None:
            setattr(cfg, key, parse_value(key, str(value)))
    if not cfg.data:
        raise ConfigError("missing required key 'data'", path=args.config)
    D = load_data(cfg.data)
    if not D.is_hard:
        raise ConfigurationError("training data needs hard labels")
    val = load_data(cfg.val) if cfg.val else None
    if val is None and cfg.val_split:
        D, val = data.split_validation(D, cfg.val_split, cfg.seed)
    spec = LikelihoodSpec(cfg.likelihood, cfg.gamma, cfg.gamma_out, cfg.ood_weight,
                          cfg.untempered, cfg.label_smoothing)
    if spec.uses_ood and cfg.ood == "none":
        raise ConfigurationError(f"likelihood {cfg.likelihood!r} needs --ood")
    D_out = _ood_set(cfg, D) if spec.uses_ood else None
    c = _n_classes(D)
    model = init_mlp([D.dim] + cfg.hidden + [c], cfg.activation, cfg.seed)
    if spec.variant == "nc":
        model = expand_none_class(model, seed=cfg.seed + 1)
    tcfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.optimizer, cfg.lr, cfg.momentum,
                       weight_decay=cfg.weight_decay, cosine_decay=cfg.cosine_decay,
                       seed=cfg.seed)
    model, trace = train_map(model, spec, D, D_out, tcfg)
    posterior = Posterior.map_point()
    if cfg.method == "la":
        grid_ = cfg.la_grid or LaplaceConfig().prior_grid
        lcfg = LaplaceConfig(grid_, cfg.la_include_ood, cfg.la_samples, cfg.la_scope, cfg.seed)
        if val is None and len(grid_) > 1:
            raise ConfigurationError("Laplace prior tuning needs 'val' or 'val_split'")
        posterior = fit_laplace(model, spec, D, D_out, lcfg, val)
        log.info("laplace prior precision %g", posterior.meta["prior_precision"])
    elif cfg.method == "vb":
        vcfg = VbConfig(cfg.vb_tau, cfg.vb_prior_precision, cfg.vb_elbo_samples,
                        cfg.vb_samples, cfg.vb_init_log_std)
        vtcfg = TrainConfig(cfg.vb_epochs or cfg.epochs, cfg.batch_size, cfg.optimizer,
                            cfg.vb_lr, cfg.momentum, weight_decay=0.0,
                            cosine_decay=cfg.cosine_decay, seed=cfg.seed)
        posterior, vtrace = fit_vb(model, spec, D, D_out, vcfg, vtcfg)
        offset = len(trace)
        trace = trace + [dict(r, step=r["step"] + offset) for r in vtrace]
    save_model(args.out, model, posterior)
    trace_path = args.trace or cfg.trace
    if trace_path:
        write_trace(trace_path, trace)
    return EXIT_OK


def _emit(report, out):
    text = metrics.MetricsReport.csv_header() + "\n" + report.csv_row() + "\n"
    sys.stdout.write(text)
    if out:
        with open(out, "w", newline="") as f:
            f.write(text)


def _load(args):
    model, post = load_model(args.model, args.samples)
    return model, post


def cmd_eval(args):
    model, post = _load(args)
    D = load_data(args.data)
    if args.val_split:
        D, _ = data.split_validation(D, args.val_split, args.seed)
    if not D.is_hard or len(D) == 0:
        raise ConfigurationError("evaluation data needs hard labels")
    if D.dim != model.n_in:
        raise ConfigurationError(f"data has {D.dim} features, model expects {model.n_in}")
    probs = predict(model, post, D.X, args.seed)
    nc = _real_classes(model, D, args.classes)
    report = metrics.evaluate(probs, D.y, nc, dataset=args.data,
                              method="map" if post.kind == "map" else "bayes",
                              likelihood="nc" if nc else "")
    _emit(report, args.out)
    return EXIT_OK


def cmd_ood_detect(args):
    model, post = _load(args)
    D_in, D_out = load_data(args.in_data), load_data(args.out_data)
    if len(D_in) == 0 or len(D_out) == 0:
        raise UsageError("in- and out-of-distribution sets must be non-empty")
    for D in (D_in, D_out):
        if D.dim != model.n_in:
            raise ConfigurationError(f"data has {D.dim} features, model expects {model.n_in}")
    nc = _real_classes(model, D_in, args.classes)
    report = metrics.detection_report(
        predict(model, post, D_in.X, args.seed), predict(model, post, D_out.X, args.seed), nc,
        dataset=f"{args.in_data} vs {args.out_data}",
        method="map" if post.kind == "map" else "bayes", likelihood="nc" if nc else "")
    _emit(report, args.out)
    return EXIT_OK


def cmd_grid(args):
    model, post = _load(args)
    box = (args.xmin, args.xmax, args.ymin, args.ymax)
    nc = _real_classes(model, None, args.classes)
    xs, ys, conf = grid.confidence_grid(model, post, box, args.res, nc, args.seed)
    grid.write_pgm(args.out + ".pgm", conf)
    grid.write_grid_csv(args.out + ".csv", xs, ys, conf)
    return EXIT_OK


def cmd_gen_ood(args):
    src = load_data(args.source) if args.source else None
    image_out = args.source is not None and args.source.startswith("idx:")
    if args.kind == "smooth":
        if src is None:
            raise UsageError("--kind smooth needs --from")
        if args.n is not None:
            src = src.subset(np.arange(min(args.n, len(src))))
        out = data.gen_smooth_ood(src, data.SmoothNoise(seed=args.seed))
    else:
        dim = src.dim if src is not None else args.dim
        if dim is None:
            raise UsageError("--kind uniform needs --dim or --from")
        low = args.low if args.low is not None else (0.0 if image_out else -6.0)
        high = args.high if args.high is not None else (1.0 if image_out else 6.0)
        n = args.n if args.n is not None else (len(src) if src is not None else 1000)
        out = data.gen_uniform_ood(low, high, dim, n, args.seed)
    if image_out:
        data.save_idx(args.out, out)
    else:
        data.save_csv(args.out, out)
    return EXIT_OK


def build_parser():
    p = _Parser(prog="bnnood", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write it to --out")
    t.add_argument("--config", required=True)
    t.add_argument("--method", choices=["map", "vb", "la"])
    t.add_argument("--likelihood", choices=["cat", "nc", "sl", "ml", "oe"])
    t.add_argument("--ood", help="none | uniform | smooth | DATASPEC (e.g. idx:PATH)")
    t.add_argument("--seed", type=int)
    t.add_argument("--trace", help="training-trace CSV path")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    def model_args(q):
        q.add_argument("--model", required=True)
        q.add_argument("--samples", type=int, help="MC samples for Gaussian posteriors")
        q.add_argument("--classes", type=int, help="number of real classes (none-class models)")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--out", help="CSV path for the metrics row")

    e = sub.add_parser("eval", help="accuracy, ECE and Brier on a labeled set")
    model_args(e)
    e.add_argument("--data", required=True)
    e.add_argument("--val-split", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("ood-detect", help="FPR95, AUROC, AUPRC and MMC")
    model_args(o)
    o.add_argument("--in-data", required=True)
    o.add_argument("--out-data", required=True)
    o.set_defaults(func=cmd_ood_detect)

    g = sub.add_parser("grid", help="confidence heatmap of a 2-D model")
    g.add_argument("--model", required=True)
    g.add_argument("--samples", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--seed", type=int, default=0)
    for k in ("xmin", "xmax", "ymin", "ymax"):
        g.add_argument(f"--{k}", type=float, required=True)
    g.add_argument("--res", type=int, required=True)
    g.add_argument("--out", required=True, help="output prefix; writes PREFIX.pgm and PREFIX.csv")
    g.set_defaults(func=cmd_grid)

    n = sub.add_parser("gen-ood", help="write a synthetic OOD set")
    n.add_argument("--kind", choices=["uniform", "smooth"], required=True)
    n.add_argument("--from", dest="source", help="DATASPEC supplying shape (and images for smooth)")
    n.add_argument("--dim", type=int)
    n.add_argument("--low", type=float)
    n.add_argument("--high", type=float)
    n.add_argument("--n", type=int)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_gen_ood)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"bnnood: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAbort as exc:
        print(f"bnnood: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (BnnoodError, OSError) as exc:
        print(f"bnnood: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
