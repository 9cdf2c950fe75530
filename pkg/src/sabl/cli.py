"""Command-line front end: ``sabl <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import evalkit, gradcheck, synthbench as sb
from .bucketing import SIDES, SidePrediction, decode_box, encode_box, layout_from_box
from .geometry import Box
from .head import Head, HeadConfig, Variant
from .losses import write_loss_log
from .ndmath import params_from_json, params_to_json


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # flags that defer to the config file carry their effective default in the help text
    def _get_help_string(self, action):
        if "(default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: str | None) -> None:
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _box(text: str) -> Box:
    try:
        return Box.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad box {text!r}: {exc}") from None


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


def _merge(dc, section: dict, flags: dict):
    """Apply config-file values, then explicitly passed flags, onto dataclass ``dc``."""
    names = {f.name for f in fields(dc)}
    unknown = set(section) - names
    if unknown:
        raise UsageError(f"unknown config keys for {type(dc).__name__}: {sorted(unknown)}")
    values = dict(section)
    values.update({k: v for k, v in flags.items() if k in names and v is not None})
    if "size_range" in values:
        values["size_range"] = tuple(values["size_range"])
    return replace(dc, **values)


def _echo(config) -> None:
    sys.stderr.write("resolved config: " + json.dumps(sb._jsonable(config), sort_keys=True) + "\n")


SCENE_FLAGS = ("image_w", "image_h", "objects_per_scene", "proposal_jitter", "proposals_per_gt",
               "distractors_per_scene", "noise_std", "edge_scale")
TRAIN_FLAGS = ("sigma", "k", "channels", "lambda2", "beta", "lr", "momentum", "epochs", "batch_size",
               "n_scenes", "neg_per_pos")


def _add_common(p, fmt_default="json"):
    p.add_argument("--config", default=None, help="YAML config with scene/train/bench sections")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: config value, else 0)")
    p.add_argument("--out", default=None, help="output path (stdout if omitted)")
    p.add_argument("--format", choices=("json", "csv"), default=fmt_default, help="output format")
    p.add_argument("--threads", type=int, default=1, help="worker threads for evaluation; output is independent of it")


def _add_scene(p):
    d = sb.SceneConfig()
    for name in SCENE_FLAGS:
        default = getattr(d, name)
        typ = float if name != "edge_scale" else _opt_float
        if isinstance(default, int) and not isinstance(default, bool):
            typ = int
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None,
                       help=f"scene setting (default: {default})")


def _opt_float(text: str):
    return None if text.lower() in ("none", "raw") else float(text)


def _add_train(p):
    d = sb.TrainConfig()
    for name in TRAIN_FLAGS:
        default = getattr(d, name)
        typ = int if isinstance(default, int) else float
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None,
                       help=f"training setting (default: {default})")
    p.add_argument("--no-ignore", dest="use_ignore", action="store_const", const=False, default=None,
                   help="train the second-nearest bucket as a negative instead of ignoring it")
    p.add_argument("--no-top2", dest="use_top2", action="store_const", const=False, default=None,
                   help="regress offsets for the nearest bucket only")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="sabl", description="Side-aware boundary localization toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="encode bucketing targets for one proposal/gt pair", formatter_class=fmt)
    p.add_argument("--proposal", type=_box, required=True, help="x1,y1,x2,y2")
    p.add_argument("--gt", type=_box, required=True, help="x1,y1,x2,y2")
    p.add_argument("--sigma", type=float, default=1.7, help="candidate region scale")
    p.add_argument("--k", type=int, default=7, help="buckets per side")
    p.add_argument("--no-ignore", dest="use_ignore", action="store_false", help="disable the ignore bucket")
    p.add_argument("--no-top2", dest="use_top2", action="store_false", help="regress the nearest bucket only")
    _add_common(p)

    p = sub.add_parser("decode", help="decode four side predictions into a box", formatter_class=fmt)
    p.add_argument("--proposal", type=_box, required=True, help="x1,y1,x2,y2")
    p.add_argument("--pred", required=True, help="JSON file: {side: {confidences: [...], offsets: [...]}}")
    p.add_argument("--sigma", type=float, default=1.7, help="candidate region scale")
    _add_common(p)

    p = sub.add_parser("gen-scenes", help="generate synthetic scenes as JSON Lines", formatter_class=fmt)
    p.add_argument("--n", type=int, default=100, help="number of scenes")
    _add_scene(p)
    _add_common(p)

    p = sub.add_parser("train", help="train one head variant and save a checkpoint", formatter_class=fmt)
    p.add_argument("--variant", choices=[v.value for v in Variant], default="sabl", help="head variant")
    p.add_argument("--log", default=None, help="CSV loss log path")
    _add_scene(p)
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("compare", help="train and evaluate variants on shared scenes", formatter_class=fmt)
    p.add_argument("--variants", default="sabl,boundary_reg,bbox_reg", help="comma-separated variants")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--n-test-scenes", type=int, default=None, help="evaluation scenes per seed (default: 200)")
    p.add_argument("--fig5-samples", type=int, default=None, help="proposals for the displacement table (default: 10000)")
    p.add_argument("--csv-dir", default=None, help="also write CSV tables into this directory")
    _add_scene(p)
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("analyze-fig5", help="displacement mean/variance table per IoU bin", formatter_class=fmt)
    p.add_argument("--scenes", required=True, help="scenes JSON Lines")
    p.add_argument("--sigma", type=float, default=1.7, help="candidate region scale")
    p.add_argument("--k", type=int, default=7, help="buckets per side")
    _add_common(p, "csv")

    p = sub.add_parser("analyze-fig6", help="IoU improvement and positive counts for a checkpoint", formatter_class=fmt)
    p.add_argument("--scenes", required=True, help="scenes JSON Lines")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by `train`")
    p.add_argument("--noise-std", type=float, default=None, help="feature noise (default: checkpoint's)")
    _add_common(p, "csv")

    p = sub.add_parser("nms", help="plain or rescoring NMS over a JSON detection list", formatter_class=fmt)
    p.add_argument("--dets", required=True, help="JSON list of {box, score, loc_confidence}")
    p.add_argument("--iou-thr", type=float, default=0.5, help="suppression IoU threshold")
    p.add_argument("--rescore", action="store_true", help="rank by score * loc_confidence")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op", formatter_class=fmt)
    p.add_argument("--n-seeds", type=int, default=20, help="random cases per op")
    p.add_argument("--tol", type=float, default=gradcheck.TOL, help="max allowed relative error")
    _add_common(p, "csv")
    return parser


def _seed(args, section: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(section.get("seed", 0))


def cmd_encode(args) -> int:
    t = encode_box(args.proposal, args.gt, args.sigma, args.k, args.use_ignore, args.use_top2)
    _emit(json.dumps(t.to_dict(), sort_keys=True) + "\n", args.out)
    return 0


def cmd_decode(args) -> int:
    with open(args.pred) as fh:
        raw = json.load(fh)
    preds = {s: SidePrediction.from_dict(raw[s.value]) for s in SIDES}
    k = len(preds[SIDES[0]].confidences)
    res = decode_box(preds, layout_from_box(args.proposal, args.sigma, k))
    payload = {"box": res.box.to_list(), "loc_confidence": res.loc_confidence, "degenerate": res.degenerate}
    _emit(json.dumps(payload, sort_keys=True) + "\n", args.out)
    return 0


def _scene_cfg(args, conf) -> sb.SceneConfig:
    section = dict(conf.get("scene", {}))
    section["seed"] = _seed(args, section)
    return _merge(sb.SceneConfig(), section, vars(args))


def _train_cfg(args, conf, **extra) -> sb.TrainConfig:
    section = dict(conf.get("train", {}))
    section["seed"] = _seed(args, section)
    section.update(extra)
    return _merge(sb.TrainConfig(), section, vars(args))


def cmd_gen_scenes(args) -> int:
    conf = _load_config(args.config)
    scfg = _scene_cfg(args, conf)
    _echo(scfg)
    text = "".join(s.to_json() + "\n" for s in sb.gen_scenes(scfg, args.n))
    _emit(text, args.out)
    return 0


def cmd_train(args) -> int:
    conf = _load_config(args.config)
    scfg = _scene_cfg(args, conf)
    tcfg = _train_cfg(args, conf, variant=args.variant)
    _echo({"scene": scfg, "train": tcfg})
    head, hist = sb.train(tcfg, scfg)
    ckpt = {"config": {"scene": sb._jsonable(scfg), "train": sb._jsonable(tcfg)},
            "params": json.loads(params_to_json(head.params))}
    _emit(json.dumps(ckpt, sort_keys=True) + "\n", args.out)
    if args.log:
        log_path = Path(args.log)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = log_path.with_name(f".{log_path.name}.tmp")
        write_loss_log(tmp, list(enumerate(hist, 1)))
        os.replace(tmp, log_path)
    return 0


def load_checkpoint(path: str) -> tuple[Head, sb.SceneConfig, sb.TrainConfig]:
    with open(path) as fh:
        ckpt = json.load(fh)
    scene = dict(ckpt["config"]["scene"])
    scene["size_range"] = tuple(scene["size_range"])
    scfg = sb.SceneConfig(**scene)
    tcfg = sb.TrainConfig(**ckpt["config"]["train"])
    params = params_from_json(json.dumps(ckpt["params"]))
    return Head(tcfg.variant, tcfg.head_config, params), scfg, tcfg


def _csv_tables(report: dict) -> dict[str, str]:
    ap_rows, bin_rows, cnt_rows = [], [], []
    for seed, r in report["seeds"].items():
        for v, res in r["variants"].items():
            for t in res["ap_plain"]:
                ap_rows.append((seed, v, t, res["ap_plain"][t], res["ap_rescoring"][t]))
            for b in res["iou_improvement"]:
                bin_rows.append((seed, v, b["bin_lo"], b["bin_hi"], b["count"], b["iou_before"], b["iou_after"]))
            for c in res["positive_counts"]:
                cnt_rows.append((seed, v, c["threshold"], c["mean_count"]))
    f5 = [(r["bin"], r["raw_mean"], r["raw_var"], r["bucket_mean"], r["bucket_var"]) for r in report["fig5"]["rows"]]
    return {
        "ap.csv": _csv_text(("seed", "variant", "iou_thr", "ap_plain", "ap_rescoring"), ap_rows),
        "iou_bins.csv": _csv_text(("seed", "variant", "bin_lo", "bin_hi", "count", "iou_before", "iou_after"), bin_rows),
        "positive_counts.csv": _csv_text(("seed", "variant", "threshold", "mean_count"), cnt_rows),
        "fig5.csv": _csv_text(("bin", "raw_mean", "raw_var", "bucket_mean", "bucket_var"), f5),
    }


def cmd_compare(args) -> int:
    conf = _load_config(args.config)
    scfg = _scene_cfg(args, conf)
    tcfg = _train_cfg(args, conf)
    bench_sec = dict(conf.get("bench", {}))
    try:
        variants = tuple(Variant(v.strip()) for v in args.variants.split(","))
        seeds = tuple(int(s) for s in args.seeds.split(","))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    bench = sb.BenchConfig(
        scene=scfg, train=tcfg, variants=variants, seeds=seeds,
        n_test_scenes=args.n_test_scenes or bench_sec.get("n_test_scenes", 200),
        nms_iou=bench_sec.get("nms_iou", 0.5),
        fig5_samples=args.fig5_samples or bench_sec.get("fig5_samples", 10000),
    )
    _echo(bench)
    report = sb.compare(bench, threads=args.threads)
    tables = _csv_tables(report)
    if args.format == "csv":
        _emit(tables["ap.csv"], args.out)
    else:
        _emit(sb.report_to_json(report) + "\n", args.out)
    if args.csv_dir:
        for name, text in tables.items():
            write_atomic(Path(args.csv_dir) / name, text)
    return 0


def cmd_fig5(args) -> int:
    scenes = sb.read_scenes(args.scenes)
    props, gts = [], []
    for s in scenes:
        for p, m in zip(s.proposals, s.matches):
            if m >= 0:
                props.append(p)
                gts.append(s.gts[m])
    stats = evalkit.displacement_stats(np.array(props).reshape(-1, 4), np.array(gts).reshape(-1, 4), args.sigma, args.k)
    if args.format == "json":
        payload = {"rows": stats.rows, "excluded_out_of_range": stats.excluded_out_of_range,
                   "max_bound_excess": stats.max_bound_excess, "n_samples": stats.n_samples,
                   "assumption": sb.FIG5_ASSUMPTION}
        _emit(json.dumps(payload, sort_keys=True) + "\n", args.out)
    else:
        rows = [(r["bin"], r["raw_mean"], r["raw_var"], r["bucket_mean"], r["bucket_var"]) for r in stats.rows]
        _emit(_csv_text(("bin", "raw_mean", "raw_var", "bucket_mean", "bucket_var"), rows), args.out)
    return 0


def cmd_fig6(args) -> int:
    head, scfg, tcfg = load_checkpoint(args.checkpoint)
    if args.noise_std is not None:
        scfg = replace(scfg, noise_std=args.noise_std)
    seed = args.seed if args.seed is not None else scfg.seed
    scenes = sb.read_scenes(args.scenes)
    rcfg = sb.RenderConfig(tcfg.k, tcfg.channels, tcfg.sigma, scfg.noise_std, scfg.edge_scale)
    evals = sb.evaluate(head, scenes, rcfg, scfg, seed, threads=args.threads)
    props = [e.proposals[e.is_pos] for e in evals]
    refined = [e.refined[e.is_pos] for e in evals]
    gts = [e.gts for e in evals]
    bins = evalkit.iou_improvement_stats(props, refined, gts)
    counts = evalkit.positive_count_stats(refined, gts)
    if args.format == "json":
        _emit(json.dumps({"iou_improvement": bins, "positive_counts": counts}, sort_keys=True) + "\n", args.out)
    else:
        rows = [("iou_bin", f"[{b['bin_lo']:.1f},{b['bin_hi']:.1f})", b["count"], b["iou_before"], b["iou_after"], "")
                for b in bins]
        rows += [("positive_count", f"{c['threshold']:.1f}", "", "", "", c["mean_count"]) for c in counts]
        _emit(_csv_text(("table", "key", "count", "iou_before", "iou_after", "mean_count"), rows), args.out)
    return 0


def cmd_nms(args) -> int:
    with open(args.dets) as fh:
        dets = [evalkit.Detection(Box.from_seq(d["box"]), float(d["score"]), float(d.get("loc_confidence", 1.0)))
                for d in json.load(fh)]
    boxes = np.array([d.box.to_list() for d in dets]).reshape(-1, 4)
    scores = np.array([d.score for d in dets])
    if args.rescore:
        keep, scores = evalkit.rescoring_nms(boxes, scores, [d.loc_confidence for d in dets], args.iou_thr)
    else:
        keep = evalkit.nms(boxes, scores, args.iou_thr)
    payload = {"kept": keep, "scores": [float(scores[i]) for i in keep]}
    _emit(json.dumps(payload, sort_keys=True) + "\n", args.out)
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    worst = gradcheck.run_all(seed, args.n_seeds)
    ok = all(v <= args.tol for v in worst.values())
    if args.format == "json":
        text = json.dumps({"max_rel_error": worst, "tol": args.tol, "pass": ok}, sort_keys=True) + "\n"
    else:
        text = _csv_text(("op", "max_rel_error", "pass"), [(k, v, v <= args.tol) for k, v in worst.items()])
    _emit(text, args.out)
    return 0 if ok else 2


COMMANDS = {
    "encode": cmd_encode,
    "decode": cmd_decode,
    "gen-scenes": cmd_gen_scenes,
    "train": cmd_train,
    "compare": cmd_compare,
    "analyze-fig5": cmd_fig5,
    "analyze-fig6": cmd_fig6,
    "nms": cmd_nms,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command not in ("gen-scenes", "train", "compare"):
            _echo({k: (v.to_list() if isinstance(v, Box) else v) for k, v in vars(args).items()})
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    except sb.TrainingDiverged as exc:
        sys.stderr.write(f"training diverged: {exc}\n")
        return 2
    except (OSError, ValueError, KeyError, json.JSONDecodeError, yaml.YAMLError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
