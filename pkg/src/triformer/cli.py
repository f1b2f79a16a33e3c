"""``triformer`` command line.

Machine-readable results go to stdout as JSON; progress and tables go to
stderr. Exit codes: 0 success, 1 usage/config, 2 data/format, 3 numeric.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import data as hsi
from .checkpoint import load_checkpoint, model_checkpoint, save_checkpoint
from .complexity import model_flops_report
from .config import RunConfig, load_run_config
from .errors import ConfigError, DataError, NumericError, TriformerError, UsageError
from .metrics import MetricsReport, aggregate
from .model import TriFormerConfig, TriFormerModel
from .sdt import DualModel, SdtConfig, load_pretrained, sdt_evaluate, sdt_predict, tune_once
from .train import TrainConfig, evaluate, predict, train

log = logging.getLogger("triformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sidecar(out: str, suffix: str) -> Path:
    return Path(str(out) + suffix)


def _load_source(path, bands: int, normalize: bool = True) -> hsi.PatchSource:
    cube, labels = hsi.load_hsc(path)
    cube = hsi.spectral_resample(cube, bands)
    if normalize:
        cube = hsi.normalize(cube)
    return hsi.PatchSource(cube, labels)


def _with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    d = {**cfg.to_dict(), **kw}
    if "epochs" in kw and d["warmup_epochs"] >= d["epochs"] > 0:
        d["warmup_epochs"] = d["epochs"] - 1
    return TrainConfig(**d)


# -- subcommands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = hsi.SyntheticSpec()
    if args.spec:
        try:
            spec = hsi.SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except OSError as e:
            raise DataError(f"cannot read spec {args.spec}: {e.strerror or e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"spec is not valid JSON: {e}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    counts = None
    for sensor in ("A", "B"):
        cube, labels = hsi.gen_synthetic(spec, args.seed, sensor)
        path = out / f"sensor{sensor}.hsc"
        hsi.save_hsc(cube, labels, path)
        files[sensor] = {"path": str(path), "bands": cube.L}
        counts = labels.class_counts()
    write_json({"seed": args.seed, "spec": spec.to_dict()}, out / "spec.json")
    emit({"seed": args.seed, "files": files, "class_counts": {str(k): v for k, v in counts.items()},
          "spec": spec.to_dict()})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    src = _load_source(args.data, cfg.data.bands, cfg.data.normalize)
    seed = args.seed if args.seed is not None else cfg.train.seed
    tcfg = _with_overrides(cfg.train, epochs=args.epochs, seed=seed, batch=args.batch)
    mcfg = TriFormerConfig.from_dict({**cfg.model.to_dict(), "in_bands": cfg.data.bands,
                                      "num_classes": src.num_classes})
    split = hsi.SplitSpec(args.n_per_class or cfg.split.n_per_class, seed, cfg.split.overrides)
    tr, te = hsi.split_per_class(src.labels, split)
    log.info("training on %d pixels, testing on %d", len(tr), len(te))
    model = TriFormerModel(mcfg, seed=seed)
    model, history = train(model, src, tr, tcfg, history_path=_sidecar(args.out, ".history.jsonl"))
    report = MetricsReport.from_cm(evaluate(model, src, te))
    save_checkpoint(model_checkpoint(model, split={"n_per_class": split.n_per_class, "seed": split.seed},
                                     train=tcfg.to_dict()), args.out)
    metrics = {"checkpoint": str(args.out), "n_train": int(len(tr)), "n_test": int(len(te)),
               "seed": seed, **report.to_dict()}
    write_json(metrics, _sidecar(args.out, ".metrics.json"))
    if history and not args.no_figures:
        from .plotting import plot_history
        plot_history(history, _sidecar(args.out, ".history.png"))
    emit(metrics)
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = load_run_config(args.config)
    base_ckpt = load_checkpoint(args.base)
    bands = int(base_ckpt.header.get("config", {}).get("in_bands", cfg.data.bands))
    src = _load_source(args.data, bands, cfg.data.normalize)
    sdt = SdtConfig.from_dict({**cfg.sdt.to_dict(),
                               **({"cold_factor": args.cold_factor} if args.cold_factor is not None else {}),
                               **({"cold_period": args.cold_period} if args.cold_period is not None else {})})
    sdt.aux = TriFormerConfig.from_dict({**sdt.aux.to_dict(), "in_bands": bands, "num_classes": src.num_classes})
    base_seed = args.seed if args.seed is not None else cfg.tune.seed
    repeats = args.repeats or cfg.repeats
    n = args.n_per_class or cfg.split.n_per_class
    reports, first = [], None
    for i in range(repeats):
        seed = base_seed + i
        tcfg = _with_overrides(cfg.tune, epochs=args.epochs, seed=seed, batch=args.batch)
        tr, te = hsi.split_per_class(src.labels, hsi.SplitSpec(n, seed, cfg.split.overrides))
        dual = DualModel(load_pretrained(base_ckpt, bands), sdt, src.num_classes, seed=seed)
        log.info("tuning run %d/%d (seed %d) on %d pixels", i + 1, repeats, seed, len(tr))
        history = tune_once(dual, src, tr, tcfg)
        rep = MetricsReport.from_cm(sdt_evaluate(dual, src, te))
        reports.append(rep)
        if first is None:
            first = (dual, history, tcfg, seed)
    dual, history, tcfg, seed = first
    save_checkpoint(dual.to_checkpoint(n_per_class=n, seed=seed, train=tcfg.to_dict()), args.out)
    agg = aggregate(reports)
    metrics = {"checkpoint": str(args.out), "n_per_class": n, "repeats": repeats, "base_seed": base_seed,
               "cold_factor": sdt.cold_factor, "cold_period": sdt.cold_period, **agg.to_dict()}
    write_json(metrics, _sidecar(args.out, ".metrics.json"))
    with open(_sidecar(args.out, ".history.jsonl"), "w") as f:
        for rec in history:
            f.write(json.dumps(rec) + "\n")
    if history and not args.no_figures:
        from .plotting import plot_history
        plot_history(history, _sidecar(args.out, ".history.png"))
    emit(metrics)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    bands = int(ckpt.header.get("config", {}).get("in_bands", hsi.CANONICAL_BANDS))
    src = _load_source(args.data, bands)
    labels = src.labels.labels
    flat = labels.reshape(-1)
    idx = np.arange(flat.size) if args.full_map else np.flatnonzero(flat > 0)
    if ckpt.kind == "sdt":
        model = DualModel.from_checkpoint(ckpt)
        nclass = model.num_classes
        pred = sdt_predict(model, src, idx, args.batch)
    else:
        model = TriFormerModel(TriFormerConfig.from_dict(ckpt.header["config"]))
        model.load_state_dict(ckpt.tensors)
        nclass = model.config.num_classes
        pred = predict(model, src, idx, args.batch)
    class_map = np.zeros(flat.size, dtype=np.int32)
    class_map[idx] = pred + 1
    class_map = class_map.reshape(labels.shape)
    out = {"checkpoint": str(args.ckpt), "H": int(labels.shape[0]), "W": int(labels.shape[1])}
    lab_idx = np.flatnonzero(flat > 0)
    if len(lab_idx):
        from .metrics import ConfusionMatrix
        if nclass != src.num_classes:
            raise DataError(f"checkpoint predicts {nclass} classes, data has {src.num_classes}")
        cm = ConfusionMatrix.from_predictions(flat[lab_idx] - 1, class_map.reshape(-1)[lab_idx] - 1, nclass)
        out.update(MetricsReport.from_cm(cm).to_dict())
        out["confusion_matrix"] = cm.counts.tolist()
    if args.map_out:
        from .plotting import plot_maps, save_class_map
        save_class_map(class_map, nclass, args.map_out)
        out["map"] = str(args.map_out)
        if args.figure_out:
            plot_maps(class_map, labels, nclass, args.figure_out)
            out["figure"] = str(args.figure_out)
    emit(out)
    return EXIT_OK


def _parse_extents(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        parts = ()
    if len(parts) != 3:
        raise UsageError(f"--extents must look like HxWxL, got {text!r}")
    return parts


def cmd_flops(args) -> int:
    cfg = load_run_config(args.config).model if args.config else TriFormerConfig()
    ext = _parse_extents(args.extents) if args.extents else None
    report = model_flops_report(cfg, ext)
    sys.stderr.write(report.to_text() + "\n")
    if args.figure_out:
        from .plotting import plot_cost_report
        plot_cost_report(report, args.figure_out)
    emit(report.to_dict())
    return EXIT_OK


def cmd_convert_rgb(args) -> int:
    cube = hsi.rgb_to_pseudo_hsi(hsi.read_rgb(args.inp))
    labels = hsi.LabelMap(np.zeros((cube.H, cube.W), np.int32), [])
    hsi.save_hsc(cube, labels, args.out)
    emit({"out": str(args.out), "H": cube.H, "W": cube.W, "L": cube.L, "sensor_tag": cube.sensor_tag})
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    defaults = json.dumps(RunConfig().to_dict(), indent=1, sort_keys=True)
    p = argparse.ArgumentParser(
        prog="triformer",
        description="Tri-Former hyperspectral classification and single-direction tuning.",
        epilog="Run-config defaults (JSON, unknown keys rejected):\n" + defaults,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic two-sensor scene")
    g.add_argument("--spec", help="SyntheticSpec JSON (default: built-in spec)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a Tri-Former from scratch")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--data", required=True, help="HSC cube with labels")
    t.add_argument("--out", required=True, help="checkpoint path (.tfck)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--n-per-class", type=int)
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("tune", help="single-direction tuning from a pretrained base")
    u.add_argument("--base", required=True, help="pretrained base checkpoint")
    u.add_argument("--config", help="run config JSON")
    u.add_argument("--data", required=True, help="target HSC cube")
    u.add_argument("--n-per-class", type=int, help="labeled pixels per class (typically 25, 50 or 75)")
    u.add_argument("--out", required=True, help="dual checkpoint path")
    u.add_argument("--repeats", type=int, help="seeds to average (typically 5)")
    u.add_argument("--cold-factor", type=float)
    u.add_argument("--cold-period", type=int)
    u.add_argument("--seed", type=int)
    u.add_argument("--epochs", type=int)
    u.add_argument("--batch", type=int)
    u.add_argument("--no-figures", action="store_true")
    u.set_defaults(func=cmd_tune)

    e = sub.add_parser("eval", help="metrics and a classification map for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--map-out", help="indexed-colour PNG class map")
    e.add_argument("--figure-out", help="ground truth vs prediction figure (needs --map-out)")
    e.add_argument("--full-map", action="store_true", help="also classify unlabeled pixels")
    e.add_argument("--batch", type=int, default=64)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="analytic vs measured operation counts")
    f.add_argument("--config", help="run config JSON (model section used)")
    f.add_argument("--extents", help="input patch extents HxWxL")
    f.add_argument("--figure-out", help="bar chart PNG")
    f.set_defaults(func=cmd_flops)

    c = sub.add_parser("convert-rgb", help="RGB image to 32-band pseudo-HSI cube")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert_rgb)
    return p


def _thread_limit():
    n = os.environ.get("TRIFORMER_THREADS")
    if not n:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except NumericError as e:
        log.error("numeric error: %s", e)
        return EXIT_NUMERIC
    except DataError as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except (UsageError, ConfigError) as e:
        log.error("usage error: %s", e)
        return EXIT_USAGE
    except TriformerError as e:
        log.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
