"""Command-line surface: dataset generation, training, certification,
attacks, oracle comparisons, polytope sampling, and bound inspection.

Every command writes machine-readable outputs with stable schemas
(documented per-command in --help) using write-then-rename, prints a
human-readable summary to stdout, and exits nonzero with a structured
message on failure.  All randomness descends from --seed through named
sub-streams, so identical invocations produce identical files.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import attacks as atk
from . import certify as cert
from . import data as dio
from . import oracle as orc
from .bounds import compute_bounds, index_set_stats, naive_layerwise_bounds
from .dual import DualNorm, dual_backward, dual_objective
from .linops import load_model, save_model
from .models import parse_arch
from .training import TrainConfig, loss_value, metrics_csv_rows, train
from .autodiff import Var, val
from .seeds import substream


class CliError(RuntimeError):
    pass


def _write_text(path, text):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _emit_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
            for v in row))
    _write_text(path, "\n".join(lines) + "\n")


def _load_dataset(args) -> dio.Dataset:
    if getattr(args, "images", None):
        if not getattr(args, "labels", None):
            raise CliError("--images requires --labels")
        ds = dio.load_idx(args.images, args.labels, limit=args.limit)
    elif getattr(args, "data", None):
        ds = dio.load_csv(args.data)
        if args.limit is not None:
            ds = ds.subset(np.arange(min(args.limit, len(ds))))
    else:
        raise CliError("provide --data CSV or --images/--labels IDX files")
    return ds


def _norm(args) -> DualNorm:
    return DualNorm.from_name(args.norm)


def _pmap(fn, items, threads):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args):
    if args.kind == "2d":
        ds = dio.gen_2d(args.seed, n_points=args.n, min_sep=args.min_sep)
    elif args.kind == "digits":
        ds = dio.gen_image_classes(args.seed, args.n, num_classes=args.classes,
                                   side=args.side)
    else:
        raise CliError(f"unknown dataset kind {args.kind!r}")
    dio.save_csv(ds, args.out)
    if args.idx_prefix:
        dio.write_idx(ds, f"{args.idx_prefix}-images-idx3-ubyte",
                      f"{args.idx_prefix}-labels-idx1-ubyte")
    print(f"wrote {len(ds)} examples ({args.kind}) to {args.out}")
    return 0


def cmd_train(args):
    ds = _load_dataset(args)
    if args.model_in:
        net = load_model(args.model_in)
    else:
        net = parse_arch(args.arch, seed=args.seed, init=args.init)
    cfg = TrainConfig(
        eps_target=args.eps, epochs=args.epochs, batch_size=args.batch_size,
        eps_start=args.eps_start, ramp_epochs=args.ramp_epochs,
        optimizer=args.optimizer, lr=args.lr, seed=args.seed, loss=args.loss,
        norm=_norm(args), objective=args.objective,
        microbatch=args.microbatch, stop_robust_err=args.stop_robust_err)
    result = train(net, ds.inputs, ds.labels, cfg)
    save_model(net, args.out)
    if args.metrics:
        _write_text(args.metrics, "\n".join(metrics_csv_rows(result)) + "\n")
    if args.batch_log:
        _emit_csv(args.batch_log, ["epoch", "batch", "clean_loss",
                                   "robust_loss"], result.batches)
    last = result.epochs[-1]
    print(f"trained {len(result.epochs)} epochs: clean_err={last.clean_err:.4f}"
          f" robust_err_bound={last.robust_err_bound:.4f} -> {args.out}")
    return 0


def cmd_certify(args):
    ds = _load_dataset(args)
    net = load_model(args.model)
    norm = _norm(args)

    def one(i):
        return cert.certificate_reports(
            net, ds.inputs[i:i + 1], ds.labels[i:i + 1], eps=args.eps,
            norm=norm, with_max_eps=args.max_eps, newton_tol=args.newton_tol)[0]

    reports = _pmap(one, range(len(ds)), args.threads)
    for i, rep in enumerate(reports):
        rep.index = i
    cert.write_reports_jsonl(reports, args.out)
    summary = cert.summarize_reports(reports)
    if args.summary:
        _emit_csv(args.summary, ["n", "certified", "robust_error",
                                 "clean_error"],
                  [(summary["n"], summary["certified"],
                    summary["robust_error"], summary["clean_error"])])
    print(f"certified {summary['certified']}/{summary['n']} at eps={args.eps}"
          f" (robust error bound {summary['robust_error']:.4f})")
    return 0


def cmd_attack(args):
    ds = _load_dataset(args)
    net = load_model(args.model)
    norm = _norm(args)
    X, y = ds.inputs, ds.labels
    logits = net.forward(X)
    preds = np.argmax(logits, axis=1)
    test_err = float(np.mean(preds != y))
    fg = atk.fgsm(net, X, y, args.eps, domain=ds.domain_box)
    pg = atk.pgd(net, X, y, args.eps, steps=args.steps,
                 step_size=args.step_size, restarts=args.restarts,
                 domain=ds.domain_box, seed=args.seed)
    if args.with_bound:
        def one(i):
            ok, _ = cert.certify_label(net, X[i], int(y[i]), args.eps, norm)
            return not ok
        bound = float(np.mean(_pmap(one, range(len(ds)), args.threads)))
    else:
        bound = float("nan")
    rows = [(i, int(y[i]), int(preds[i]), int(fg.success[i]),
             float(fg.loss[i]), int(pg.success[i]), float(pg.loss[i]))
            for i in range(len(ds))]
    _emit_csv(args.out, ["index", "label", "predicted", "fgsm_success",
                         "fgsm_loss", "pgd_success", "pgd_loss"], rows)
    if args.summary:
        _emit_csv(args.summary,
                  ["test_err", "fgsm_err", "pgd_err", "robust_bound"],
                  [(test_err, atk.attack_error(fg), atk.attack_error(pg),
                    bound)])
    print(f"test={test_err:.4f} fgsm={atk.attack_error(fg):.4f} "
          f"pgd={atk.attack_error(pg):.4f} robust_bound={bound:.4f}")
    return 0


def cmd_eval(args):
    ds = _load_dataset(args)
    net = load_model(args.model)
    logits = net.forward(ds.inputs)
    err = float(np.mean(np.argmax(logits, axis=1) != ds.labels))
    loss = float(val(loss_value(args.loss, Var(logits), ds.labels)))
    if args.out:
        _emit_csv(args.out, ["n", "clean_err", "clean_loss"],
                  [(len(ds), err, loss)])
    print(f"n={len(ds)} clean_err={err:.4f} clean_loss={loss:.6f}")
    return 0


def cmd_oracle_check(args):
    ds = _load_dataset(args)
    net = load_model(args.model)
    norm = _norm(args)
    rng = substream(args.seed, "oracle-targets")
    if args.targets == "classes":
        eye = np.eye(net.output_dim)
        targets = np.stack([eye[a] - eye[b]
                            for a in range(net.output_dim)
                            for b in range(net.output_dim) if a != b])
    else:
        targets = rng.normal(size=(int(args.targets), net.output_dim))
    rows, summary = orc.tightness_report(net, ds.inputs, args.eps, targets,
                                         norm=norm)
    _emit_csv(args.out, ["example", "target", "dual_j", "lp_opt", "gap"], rows)
    print(f"{summary['n']} instances: mean gap {summary['mean_gap']:.6f}, "
          f"max gap {summary['max_gap']:.6f}, min gap {summary['min_gap']:.2e}")
    return 0


def cmd_polytope(args):
    net = load_model(args.model)
    if args.x:
        x = np.array([float(v) for v in args.x.split(",")])
    else:
        ds = _load_dataset(args)
        x = ds.inputs[args.index]
    sample = orc.sample_polytope(net, x, args.eps, grid_per_dim=args.grid)
    out = args.out
    _emit_csv(f"{out}.samples.csv",
              [f"d{i}" for i in range(sample.deltas.shape[1])] +
              [f"out{i}" for i in range(sample.outputs.shape[1])],
              [tuple(d) + tuple(o) for d, o in
               zip(sample.deltas, sample.outputs)])
    if sample.hull is not None:
        _emit_csv(f"{out}.hull.csv", ["x", "y"],
                  [tuple(v) for v in sample.hull])
        poly, dirs, j = orc.outer_polygon(net, x, args.eps, n_dirs=args.dirs)
        _emit_csv(f"{out}.outer.csv", ["x", "y"], [tuple(v) for v in poly])
        _emit_csv(f"{out}.halfplanes.csv", ["cx", "cy", "j"],
                  [(dirs[i, 0], dirs[i, 1], float(j[i]))
                   for i in range(len(j))])
        bounds = compute_bounds(net, x, args.eps)
        _write_text(f"{out}.box.json", json.dumps({
            "lower": list(bounds.lower[-1]), "upper": list(bounds.upper[-1])}))
        ratio = orc.polygon_area(poly) / max(orc.polygon_area(sample.hull),
                                             1e-300)
        print(f"sampled {len(sample.outputs)} outputs; hull area "
              f"{orc.polygon_area(sample.hull):.6g}, outer/hull ratio "
              f"{ratio:.3f}")
    else:
        print(f"sampled {len(sample.outputs)} outputs "
              f"({sample.outputs.shape[1]}-d output: no hull)")
    return 0


def cmd_bounds_check(args):
    net = load_model(args.model)
    if args.x:
        x = np.array([float(v) for v in args.x.split(",")])
    else:
        ds = _load_dataset(args)
        x = ds.inputs[args.index]
    fn = naive_layerwise_bounds if args.naive else compute_bounds
    bounds = fn(net, x, args.eps, norm=_norm(args))
    fracs = index_set_stats(bounds)
    layers = []
    for i in range(len(bounds.lower)):
        rec = {"layer": i + 2,
               "lower": list(bounds.lower[i]), "upper": list(bounds.upper[i])}
        if i < len(fracs):
            rec["neg"] = np.flatnonzero(bounds.partition.neg[i]).tolist()
            rec["pos"] = np.flatnonzero(bounds.partition.pos[i]).tolist()
            rec["span"] = np.flatnonzero(bounds.partition.span[i]).tolist()
            rec["fractions"] = list(fracs[i])
        layers.append(rec)
    _write_text(args.out, json.dumps(
        {"eps": args.eps, "norm": args.norm, "layers": layers}, indent=1))
    frac_str = " ".join(f"[{f[0]:.2f},{f[1]:.2f},{f[2]:.2f}]" for f in fracs)
    print(f"bounds for {len(layers)} layers; (I-,I+,I) fractions: {frac_str}")
    return 0


def cmd_manifest(args):
    with open(args.file) as f:
        spec = json.load(f)
    runs = spec["runs"] if isinstance(spec, dict) else spec
    for argv in runs:
        argv = [str(a) for a in argv]
        print(f"$ relucert {' '.join(argv)}")
        code = main(argv)
        if code != 0:
            raise CliError(f"manifest step failed: {argv}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_data_args(p, with_limit=True):
    p.add_argument("--data", help="dataset CSV (x0..xd,label header)")
    p.add_argument("--images", help="IDX image file (optionally .gz)")
    p.add_argument("--labels", help="IDX label file (optionally .gz)")
    if with_limit:
        p.add_argument("--limit", type=int, default=None,
                       help="truncate the dataset to this many examples")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="relucert",
        description="Train and certify ReLU networks against l-inf "
                    "adversarial perturbations via dual bounds.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset",
                       epilog="Output CSV schema: x0,...,xd,label")
    p.add_argument("--kind", choices=["2d", "digits"], default="2d")
    p.add_argument("--n", type=int, default=12)
    p.add_argument("--min-sep", type=float, default=0.16)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--side", type=int, default=28)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--idx-prefix", default=None,
                   help="also write <prefix>-images-idx3-ubyte / "
                        "<prefix>-labels-idx1-ubyte")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser(
        "train", help="train a robust (or standard) classifier",
        epilog="Metrics CSV schema: epoch,eps,clean_loss,clean_err,"
               "robust_loss,robust_err_bound ; batch log: epoch,batch,"
               "clean_loss,robust_loss ; checkpoint: model JSON")
    _add_data_args(p)
    p.add_argument("--arch", default="dense:2,100,100,100,100,2")
    p.add_argument("--init", choices=["default", "paper"], default="default")
    p.add_argument("--model-in", default=None,
                   help="resume from an existing checkpoint")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--eps-start", type=float, default=None)
    p.add_argument("--ramp-epochs", type=int, default=0)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--loss", choices=["cross_entropy", "hinge"],
                   default="cross_entropy")
    p.add_argument("--norm", choices=["linf", "l2"], default="linf")
    p.add_argument("--objective", choices=["robust", "standard"],
                   default="robust")
    p.add_argument("--microbatch", type=int, default=None)
    p.add_argument("--stop-robust-err", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path (JSON)")
    p.add_argument("--metrics", default=None)
    p.add_argument("--batch-log", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser(
        "certify", help="certificates per example",
        epilog="JSONL record: {index,predicted,certified,margin,eps"
               "[,true_label][,max_certified_eps,newton_iters]} ; summary "
               "CSV: n,certified,robust_error,clean_error")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--norm", choices=["linf", "l2"], default="linf")
    p.add_argument("--max-eps", action="store_true",
                   help="also search the maximum certified radius")
    p.add_argument("--newton-tol", type=float, default=1e-3)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="JSONL output")
    p.add_argument("--summary", default=None)
    p.set_defaults(fn=cmd_certify)

    p = sub.add_parser(
        "attack", help="FGSM/PGD attack sweep",
        epilog="Per-example CSV: index,label,predicted,fgsm_success,"
               "fgsm_loss,pgd_success,pgd_loss ; summary CSV columns in "
               "Table-1 order: test_err,fgsm_err,pgd_err,robust_bound")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--norm", choices=["linf", "l2"], default="linf")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--with-bound", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", default=None)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("eval", help="clean error and loss",
                       epilog="CSV: n,clean_err,clean_loss")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--loss", choices=["cross_entropy", "hinge", "zero_one"],
                   default="cross_entropy")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser(
        "oracle-check", help="dual bound vs exact LP optimum",
        epilog="CSV: example,target,dual_j,lp_opt,gap")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--norm", choices=["linf", "l2"], default="linf")
    p.add_argument("--targets", default="4",
                   help="integer count of random objectives, or 'classes'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_oracle_check)

    p = sub.add_parser(
        "polytope", help="sample the true polytope and the outer bound",
        epilog="Outputs: <out>.samples.csv (d*,out*), <out>.hull.csv (x,y),"
               " <out>.outer.csv (x,y), <out>.halfplanes.csv (cx,cy,j),"
               " <out>.box.json")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--x", default=None, help="comma-separated input point")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--grid", type=int, default=201)
    p.add_argument("--dirs", type=int, default=64)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(fn=cmd_polytope)

    p = sub.add_parser(
        "bounds-check", help="dump per-layer bounds and index sets",
        epilog="JSON: {eps,norm,layers:[{layer,lower,upper,neg,pos,span,"
               "fractions}]}")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--x", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--norm", choices=["linf", "l2"], default="linf")
    p.add_argument("--naive", action="store_true",
                   help="use the naive layerwise bounds instead")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bounds_check)

    p = sub.add_parser("manifest", help="replay a JSON list of commands")
    p.add_argument("file")
    p.set_defaults(fn=cmd_manifest)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
