"""Command-line pipeline: gen-data, train, explain, segment, eval, bench, sweep-seeds, compare."""

import argparse
import contextlib
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import data as D
from . import explain as X
from . import export
from . import metrics as M
from .model import BackboneConfig, Model, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train
from .segment import segment_image
from .wsst import WSSTError

log = logging.getLogger("wsss")

DEFAULTS = {
    "dataset_dir": None,
    "checkpoint": None,
    "out": None,
    "tau": 0.5,
    "seeds": X.DEFAULT_SEEDS,
    "method": "all",
    "seed": 42,
    "threads": 1,
    "force": False,
    "total": D.SyntheticConfig().n_total,
    "epochs": TrainConfig().epochs,
    "lr": TrainConfig().lr,
    "batch_size": TrainConfig().batch_size,
    "split": "test",
    "limit": 0,
    "repetitions": 3,
    "timing_images": 32,
    "candidates": "1,5,10,25",
    "average": "macro",
}

FORMATS = """\
file formats:
  WSST tensors   magic 'WSST', version 01, dtype 01=f32 / 02=u8, ndim, u32 LE dims,
                 row-major LE payload
  dataset dir    manifest.json + samples/<split>/<idx>.{img,lbl,ref}.wsst
  checkpoint     <dir>/base and/or <dir>/pcm, each manifest.json + params/<layer>.wsst
  heatmaps       <method>/<split>_<idx>.heat.wsst (S x h x w) and .c<s>.pgm (round(255 p))
  label maps     <method>/<split>_<idx>.lbl.wsst (u8) and .ppm (palette in README)
  reports        report.json (method -> f1_per_class, f1_macro, params, seg_time_ms_mean,
                 seg_time_ms_std, backward_passes), report.txt, report.tsv, *.png
"""


class CLIError(Exception):
    pass


def _methods(name):
    return list(X.METHODS) if name == "all" else [name]


def _add_common(p, *names):
    h = {
        "dataset_dir": ("--dataset-dir", dict(help="dataset directory (manifest.json + samples/)")),
        "checkpoint": ("--checkpoint", dict(help="checkpoint directory (holds base/ and/or pcm/)")),
        "out": ("--out", dict(help="output directory")),
        "tau": ("--tau", dict(type=float, help="image-level probability threshold (default 0.5)")),
        "seeds": ("--seeds", dict(type=int, metavar="E", help="SEM seed count E (default 10)")),
        "method": ("--method", dict(choices=list(X.METHODS) + ["all"], help="explanation method (default all)")),
    }
    for n in names:
        flag, kw = h[n]
        p.add_argument(flag, dest=n, default=None, **kw)
    p.add_argument("--seed", type=int, default=None, help="rng seed (default 42)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker/BLAS thread cap; 1 is the deterministic reference path (default 1)")
    p.add_argument("--force", action="store_true", default=None, help="replace existing outputs")
    p.add_argument("--config", default=None, help="JSON file of option overrides (flags win)")


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="wsss", description=__doc__, epilog=FORMATS, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus", epilog=FORMATS, formatter_class=fmt)
    _add_common(p, "dataset_dir")
    p.add_argument("--total", type=int, default=None, help="total samples, split 70/15/15 (default 856)")

    p = sub.add_parser("train", help="train base and/or PCM models", epilog=FORMATS, formatter_class=fmt)
    _add_common(p, "dataset_dir", "checkpoint", "method")
    p.add_argument("--epochs", type=int, default=None, help="epochs (default 15)")
    p.add_argument("--lr", type=float, default=None, help="SGD learning rate (default 0.05)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="batch size (default 16)")

    for name, text in (("explain", "write heatmaps (WSST + PGM)"), ("segment", "write label maps (WSST + PPM)")):
        p = sub.add_parser(name, help=text, epilog=FORMATS, formatter_class=fmt)
        _add_common(p, "dataset_dir", "checkpoint", "out", "tau", "seeds", "method")
        p.add_argument("--split", choices=D.SPLITS, default=None, help="dataset split (default test)")
        p.add_argument("--limit", type=int, default=None, help="first N samples only; 0 = all (default 0)")

    p = sub.add_parser("eval", help="pixel F1 per method", epilog=FORMATS, formatter_class=fmt)
    _add_common(p, "dataset_dir", "checkpoint", "out", "tau", "seeds", "method")
    p.add_argument("--split", choices=D.SPLITS, default=None, help="dataset split (default test)")
    p.add_argument("--average", choices=["macro", "micro", "weighted"], default=None,
                   help="F1 averaging (default macro)")

    p = sub.add_parser("bench", help="segmentation time per image", epilog=FORMATS, formatter_class=fmt)
    _add_common(p, "dataset_dir", "checkpoint", "out", "tau", "seeds", "method")
    p.add_argument("--repetitions", type=int, default=None, help="timed runs, >= 3 (default 3)")
    p.add_argument("--timing-images", dest="timing_images", type=int, default=None,
                   help="images timed per run (default 32)")

    p = sub.add_parser("sweep-seeds", help="choose SEM seed count on validation", epilog=FORMATS,
                       formatter_class=fmt)
    _add_common(p, "dataset_dir", "checkpoint", "out", "tau")
    p.add_argument("--candidates", default=None, help="comma-separated E values (default 1,5,10,25)")

    p = sub.add_parser("compare", help="F1 / # Param / Seg. Time table for all methods", epilog=FORMATS,
                       formatter_class=fmt)
    _add_common(p, "dataset_dir", "checkpoint", "out", "tau", "seeds", "method")
    p.add_argument("--repetitions", type=int, default=None, help="timed runs, >= 3 (default 3)")
    p.add_argument("--timing-images", dest="timing_images", type=int, default=None,
                   help="images timed per run (default 32)")
    p.add_argument("--average", choices=["macro", "micro", "weighted"], default=None,
                   help="F1 averaging (default macro)")
    return parser


def resolve(args):
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CLIError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise CLIError(f"config file {path} is not valid JSON: {e}") from None
        for k, v in cfg.items():
            key = k.replace("-", "_")
            if key not in DEFAULTS:
                raise CLIError(f"unknown option {k!r} in config file {path}")
            opts[key] = v
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            opts[k] = v
    if not 0 < float(opts["tau"]) < 1:
        raise CLIError(f"--tau must lie in (0, 1), got {opts['tau']}")
    if int(opts["threads"]) < 1:
        raise CLIError("--threads must be >= 1")
    return argparse.Namespace(command=args.command, **opts)


def _need(opts, *names):
    for n in names:
        if getattr(opts, n) is None:
            raise CLIError(f"--{n.replace('_', '-')} is required for {opts.command}")


@contextlib.contextmanager
def staged_dir(target, force):
    """Build outputs in a sibling temp dir and swap it in only on success."""
    target = Path(target)
    if target.exists() and (not target.is_dir() or any(target.iterdir())) and not force:
        raise CLIError(f"output {target} already exists; pass --force to replace it")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        if target.is_dir():
            shutil.rmtree(target)
        else:
            target.unlink()
    tmp.chmod(0o755)
    tmp.rename(target)


def _load_dataset(opts, splits):
    path = Path(opts.dataset_dir)
    if not (path / "manifest.json").is_file():
        raise CLIError(f"dataset not found: {path / 'manifest.json'}")
    return D.load_dataset(path, splits)


def load_models(checkpoint, methods):
    """``{"base": Model, "pcm": Model}`` restricted to what ``methods`` need."""
    root = Path(checkpoint)
    need = set()
    for m in methods:
        need.add("pcm" if m == "pcm" else "base")
    models = {}
    for key in sorted(need):
        path = root / key
        if not (path / "manifest.json").is_file():
            raise CLIError(f"checkpoint not found: {path / 'manifest.json'}")
        models[key], _ = load_checkpoint(path)
    return models


def _samples(ds, split, limit):
    samples = ds[split]
    return samples[:limit] if limit else samples


def _write_reports(out, reports):
    (out / "report.json").write_text(json.dumps(M.report_json(reports), indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(M.format_table(reports))
    (out / "report.tsv").write_text(M.format_tsv(reports))


# -- subcommands ------------------------------------------------------------


def cmd_gen_data(opts):
    _need(opts, "dataset_dir")
    cfg = D.SyntheticConfig(n_total=int(opts.total))
    ds = D.generate(cfg, int(opts.seed))
    with staged_dir(opts.dataset_dir, opts.force) as tmp:
        D.save_dataset(ds, tmp)
    sizes = "/".join(str(len(ds[s])) for s in D.SPLITS)
    print(f"gen-data: wrote {sizes} train/val/test samples to {opts.dataset_dir}")


def cmd_train(opts):
    from . import plotting

    _need(opts, "dataset_dir", "checkpoint")
    ds = _load_dataset(opts, ("train", "val"))
    methods = _methods(opts.method)
    variants = sorted({"pcm" if m == "pcm" else "base" for m in methods})
    tcfg = TrainConfig(epochs=int(opts.epochs), lr=float(opts.lr), batch_size=int(opts.batch_size),
                       seed=int(opts.seed), tau=float(opts.tau))
    summary = []
    with staged_dir(opts.checkpoint, opts.force) as tmp:
        for key in variants:
            bcfg = BackboneConfig(in_channels=ds.config.channels, n_classes=ds.config.n_classes,
                                  image_size=ds.config.image_size, pcm=key == "pcm")
            model = Model(bcfg, seed=int(opts.seed))
            res = train(model, ds["train"], ds["val"], tcfg)
            meta = {
                "train_config": vars(tcfg),
                "loss_history": res.loss_history,
                "val_f1_history": res.val_f1_history,
                "best_epoch": res.best_epoch,
                "dataset_seed": ds.seed,
            }
            save_checkpoint(model, tmp / key, meta)
            plotting.plot_training(res.loss_history, res.val_f1_history, tmp / f"training_{key}.png")
            best = res.val_f1_history[res.best_epoch] if res.val_f1_history else float("nan")
            summary.append(f"{key}: val F1 {best:.4f} (epoch {res.best_epoch + 1})")
    print(f"train: {'; '.join(summary)} -> {opts.checkpoint}")


def _explain_or_segment(opts, write_labels):
    from . import plotting

    _need(opts, "dataset_dir", "checkpoint", "out")
    methods = _methods(opts.method)
    models = load_models(opts.checkpoint, methods)
    ds = _load_dataset(opts, (opts.split,))
    samples = _samples(ds, opts.split, int(opts.limit))
    count = 0
    with staged_dir(opts.out, opts.force) as tmp:
        label_maps = {}
        for method in methods:
            model = M.model_for(method, models)
            sub = tmp / method
            label_maps[method] = []
            for i, s in enumerate(samples):
                seg, heat = segment_image(method, model, s.image, float(opts.tau), int(opts.seeds))
                stem = f"{opts.split}_{i:05d}"
                if write_labels:
                    export.save_label_map(seg.labels, sub, stem)
                    label_maps[method].append(seg.labels)
                else:
                    export.save_heatmaps(heat, sub, stem)
                    if i == 0:
                        plotting.plot_heatmaps(heat, tmp / f"heatmaps_{method}.png")
                count += 1
        if write_labels and samples:
            plotting.plot_panel(samples, label_maps, tmp / "panel.png")
    kind = "label maps" if write_labels else "heatmap sets"
    print(f"{opts.command}: wrote {count} {kind} for {', '.join(methods)} to {opts.out}")


def cmd_explain(opts):
    _explain_or_segment(opts, write_labels=False)


def cmd_segment(opts):
    _explain_or_segment(opts, write_labels=True)


def cmd_eval(opts):
    from . import plotting

    _need(opts, "dataset_dir", "checkpoint", "out")
    methods = _methods(opts.method)
    models = load_models(opts.checkpoint, methods)
    ds = _load_dataset(opts, (opts.split,))
    samples = ds[opts.split]
    reports = [M.evaluate_method(m, M.model_for(m, models), samples, float(opts.tau), int(opts.seeds),
                                 opts.average) for m in methods]
    with staged_dir(opts.out, opts.force) as tmp:
        _write_reports(tmp, reports)
        plotting.plot_comparison(reports, tmp / "comparison.png")
    line = ", ".join(f"{m.method} F1 {100 * m.f1_macro:.2f}%" for m in reports)
    print(f"eval: {line} -> {opts.out}")


def cmd_bench(opts):
    _need(opts, "dataset_dir", "checkpoint", "out")
    methods = _methods(opts.method)
    models = load_models(opts.checkpoint, methods)
    ds = _load_dataset(opts, ("test",))
    images = [s.image for s in ds["test"][: int(opts.timing_images)]]
    base = M.measure_forward_time(models.get("base") or models["pcm"], images, int(opts.repetitions))
    result = {"forward_only": {"seg_time_ms_mean": base["mean"], "seg_time_ms_std": base["std"]}}
    for m in methods:
        model = M.model_for(m, models)
        t = M.measure_seg_time(m, model, images, int(opts.repetitions), float(opts.tau), int(opts.seeds))
        result[m] = {"seg_time_ms_mean": t["mean"], "seg_time_ms_std": t["std"], "runs_ms": t["runs"]}
    with staged_dir(opts.out, opts.force) as tmp:
        (tmp / "bench.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        lines = ["method\tseg_time_ms_mean\tseg_time_ms_std"]
        lines += [f"{k}\t{v['seg_time_ms_mean']:.4f}\t{v['seg_time_ms_std']:.4f}" for k, v in result.items()]
        (tmp / "bench.tsv").write_text("\n".join(lines) + "\n")
    line = ", ".join(f"{k} {v['seg_time_ms_mean']:.2f} ms" for k, v in result.items())
    print(f"bench: {line} -> {opts.out}")


def cmd_sweep_seeds(opts):
    from . import plotting

    _need(opts, "dataset_dir", "checkpoint", "out")
    try:
        cands = [int(c) for c in str(opts.candidates).split(",") if c.strip()]
    except ValueError:
        raise CLIError(f"--candidates must be comma-separated integers, got {opts.candidates!r}") from None
    models = load_models(opts.checkpoint, ["sem"])
    ds = _load_dataset(opts, ("val",))
    result = M.sweep_seeds(models["base"], ds["val"], cands, float(opts.tau))
    with staged_dir(opts.out, opts.force) as tmp:
        payload = {"f1": {str(k): v for k, v in result["f1"].items()}, "best": result["best"]}
        (tmp / "sweep.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        (tmp / "sweep.tsv").write_text(
            "E\tf1_macro\n" + "".join(f"{k}\t{v:.6f}\n" for k, v in result["f1"].items()))
        plotting.plot_seed_sweep(result, tmp / "sweep.png")
    print(f"sweep-seeds: best E = {result['best']} (F1 {100 * result['f1'][result['best']]:.2f}%) -> {opts.out}")


def cmd_compare(opts):
    from . import plotting

    _need(opts, "dataset_dir", "checkpoint", "out")
    methods = _methods(opts.method)
    models = load_models(opts.checkpoint, methods)
    ds = _load_dataset(opts, ("test",))
    samples = ds["test"]
    reports = M.compare_methods(models, samples, methods, float(opts.tau), int(opts.seeds),
                               int(opts.repetitions), int(opts.timing_images), opts.average)
    with staged_dir(opts.out, opts.force) as tmp:
        _write_reports(tmp, reports)
        run = {"tau": float(opts.tau), "E": int(opts.seeds), "split": "test", "n_images": len(samples),
               "average": opts.average, "methods": methods}
        (tmp / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
        for rep in reports:
            for i, labels in enumerate(rep.label_maps):
                export.save_label_map(labels, tmp / "labels" / rep.method, f"test_{i:05d}")
        plotting.plot_comparison(reports, tmp / "comparison.png")
        plotting.plot_panel(samples, {r.method: r.label_maps for r in reports}, tmp / "panel.png")
    sys.stdout.write(M.format_table(reports))
    print(f"compare: {len(reports)} methods on {len(samples)} test images -> {opts.out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "explain": cmd_explain,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "sweep-seeds": cmd_sweep_seeds,
    "compare": cmd_compare,
}


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        with threadpool_limits(int(opts.threads)):
            COMMANDS[opts.command](opts)
    except (CLIError, FileNotFoundError, WSSTError, ValueError, KeyError, TrainingDiverged) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"wsss {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
