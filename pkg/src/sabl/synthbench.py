"""Synthetic detection scenes, geometry-derived RoI features, training and comparison.

RoI features stand in for a backbone: a ``k x k`` grid of pixel centres is
laid over the sigma-scaled candidate region and channels 0-3 hold the signed
distances from each centre to the gt's x1, x2, y1 and y2, normalized by the
proposal width or height. With ``edge_scale`` set, the distances are squashed
through ``tanh(d / edge_scale)`` so only centres near an edge carry fine
position evidence, as a conv feature would; ``edge_scale=None`` keeps the raw
linear distances. Remaining channels are Gaussian noise. Background
proposals get noise in every channel.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import evalkit
from .bucketing import BACKGROUND, assign_proposals, encode_box
from .geometry import Box, iou_matrix
from .head import DELTA_STDS, Head, HeadConfig, Variant, encode_deltas, refine
from .losses import (LossReport, LossWeights, TargetArrays, bucketing_loss, delta_loss,
                     objectness_loss, regression_loss, stack_targets, total_loss)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SceneConfig:
    image_w: float = 256.0
    image_h: float = 256.0
    objects_per_scene: int = 2
    size_range: tuple[float, float] = (32.0, 128.0)
    proposal_jitter: float = 0.15
    proposals_per_gt: int = 4
    distractors_per_scene: int = 8
    noise_std: float = 0.1
    edge_scale: float | None = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.size_range
        if not (self.image_w > 0 and self.image_h > 0 and 0 < lo <= hi):
            raise ValueError("image size and size_range must be positive")
        if hi > min(self.image_w, self.image_h):
            raise ValueError("objects larger than the image")
        if self.proposal_jitter < 0 or self.noise_std < 0:
            raise ValueError("jitter and noise_std must be >= 0")


@dataclass
class Scene:
    gts: np.ndarray
    proposals: np.ndarray
    matches: list[int]

    def to_json(self) -> str:
        return json.dumps({
            "gts": self.gts.tolist(),
            "proposals": self.proposals.tolist(),
            "matches": list(self.matches),
        })

    @classmethod
    def from_json(cls, line: str) -> "Scene":
        d = json.loads(line)
        return cls(np.asarray(d["gts"], float).reshape(-1, 4),
                   np.asarray(d["proposals"], float).reshape(-1, 4),
                   [int(m) for m in d["matches"]])

    @property
    def positive_mask(self) -> np.ndarray:
        return np.asarray(self.matches) >= 0


def _clip(b: np.ndarray, w: float, h: float) -> np.ndarray:
    return np.clip(b, 0.0, [w, h, w, h])


def gen_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    lo, hi = cfg.size_range
    gts = []
    for _ in range(cfg.objects_per_scene):
        w, h = rng.uniform(lo, hi, size=2)
        x1 = rng.uniform(0, cfg.image_w - w)
        y1 = rng.uniform(0, cfg.image_h - h)
        gts.append([x1, y1, x1 + w, y1 + h])
    gts = np.array(gts, dtype=np.float64).reshape(-1, 4)

    props = []
    for g in gts:
        size = np.array([g[2] - g[0], g[3] - g[1]] * 2)
        for _ in range(cfg.proposals_per_gt):
            for _ in range(100):
                p = _clip(g + rng.normal(0.0, cfg.proposal_jitter, 4) * size, cfg.image_w, cfg.image_h)
                if p[2] > p[0] and p[3] > p[1] and iou_matrix(p, g)[0, 0] >= 0.5:
                    props.append(p)
                    break
    for _ in range(cfg.distractors_per_scene):
        w, h = rng.uniform(lo, hi, size=2)
        x1 = rng.uniform(0, cfg.image_w - w)
        y1 = rng.uniform(0, cfg.image_h - h)
        props.append(np.array([x1, y1, x1 + w, y1 + h]))
    props = np.array(props, dtype=np.float64).reshape(-1, 4)
    return Scene(gts, props, assign_proposals(props, gts, 0.5, 0.5))


def scene_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, stream]))


def gen_scenes(cfg: SceneConfig, n: int, seed: int | None = None) -> list[Scene]:
    seed = cfg.seed if seed is None else seed
    return [gen_scene(cfg, scene_rng(seed, i)) for i in range(n)]


def write_scenes(path: str | Path, scenes: Iterable[Scene]) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(s.to_json() + "\n")


def read_scenes(path: str | Path) -> list[Scene]:
    with open(path) as fh:
        return [Scene.from_json(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class RenderConfig:
    k: int = 7
    channels: int = 8
    sigma: float = 1.7
    noise_std: float = 0.1
    edge_scale: float | None = 0.05

    def __post_init__(self):
        if self.edge_scale is not None and self.edge_scale <= 0:
            raise ValueError("edge_scale must be positive or None")
        if self.channels < 5:
            raise ValueError("need at least 5 channels")


def render_batch(proposals: np.ndarray, gts: np.ndarray, cfg: RenderConfig, rng: np.random.Generator) -> np.ndarray:
    """Render ``[N, k, k, C]`` features. Rows of ``gts`` that are NaN mark background."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n, k, c = len(p), cfg.k, cfg.channels
    noise = rng.normal(0.0, 1.0, size=(n, k, k, c)) * cfg.noise_std
    out = noise
    fg = ~np.isnan(g).any(axis=1)
    if not fg.any():
        return out
    p, g = p[fg], g[fg]
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    cx, cy = 0.5 * (p[:, 0] + p[:, 2]), 0.5 * (p[:, 1] + p[:, 3])
    rw, rh = cfg.sigma * pw, cfg.sigma * ph
    t = (np.arange(k) + 0.5) / k
    px = (cx - 0.5 * rw)[:, None] + t[None, :] * rw[:, None]
    py = (cy - 0.5 * rh)[:, None] + t[None, :] * rh[:, None]
    geo = np.empty((len(p), k, k, 4))
    geo[..., 0] = ((px - g[:, 0:1]) / pw[:, None])[:, None, :]
    geo[..., 1] = ((px - g[:, 2:3]) / pw[:, None])[:, None, :]
    geo[..., 2] = ((py - g[:, 1:2]) / ph[:, None])[:, :, None]
    geo[..., 3] = ((py - g[:, 3:4]) / ph[:, None])[:, :, None]
    if cfg.edge_scale is not None:
        geo = np.tanh(geo / cfg.edge_scale)
    out[fg, ..., :4] = geo
    return out


def render_roi_feature(proposal: Box, gt: Box | None, cfg: RenderConfig, rng: np.random.Generator) -> np.ndarray:
    g = np.full(4, np.nan) if gt is None else np.array(gt.to_list())
    return render_batch(np.array([proposal.to_list()]), g, cfg, rng)[0]


def scene_targets_gt(scene: Scene) -> np.ndarray:
    """Matched gt per proposal, NaN rows for background."""
    out = np.full((len(scene.proposals), 4), np.nan)
    for i, m in enumerate(scene.matches):
        if m >= 0:
            out[i] = scene.gts[m]
    return out


@dataclass(frozen=True)
class TrainConfig:
    variant: Variant = Variant.SABL
    sigma: float = 1.7
    k: int = 7
    channels: int = 8
    lambda2: float = 1.0
    beta: float = 1.0
    use_ignore: bool = True
    use_top2: bool = True
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    n_scenes: int = 2000
    neg_per_pos: float = 1.0
    out_of_range_negative: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if self.sigma < 1:
            raise ValueError("sigma must be >= 1")

    @property
    def head_config(self) -> HeadConfig:
        return HeadConfig(k=self.k, channels=self.channels)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingSet:
    features: np.ndarray
    proposals: np.ndarray
    gts: np.ndarray
    is_pos: np.ndarray


def build_training_set(scenes: Sequence[Scene], rcfg: RenderConfig, seed: int) -> TrainingSet:
    feats, props, gts = [], [], []
    for i, s in enumerate(scenes):
        keep = np.asarray(s.matches) != -2
        g = scene_targets_gt(s)[keep]
        p = s.proposals[keep]
        feats.append(render_batch(p, g, rcfg, scene_rng(seed, i, 1)))
        props.append(p)
        gts.append(g)
    gts_all = np.concatenate(gts) if gts else np.zeros((0, 4))
    return TrainingSet(
        np.concatenate(feats) if feats else np.zeros((0, rcfg.k, rcfg.k, rcfg.channels)),
        np.concatenate(props) if props else np.zeros((0, 4)),
        gts_all,
        ~np.isnan(gts_all).any(axis=1),
    )


def _sabl_targets(data: TrainingSet, cfg: TrainConfig) -> TargetArrays:
    k = cfg.k
    n = len(data.proposals)
    labels = np.zeros((n, 4, k), dtype=np.int64)
    offsets = np.zeros((n, 4, k))
    valid = np.zeros((n, 4, k), dtype=bool)
    in_range = np.zeros((n, 4), dtype=bool)
    pos = np.flatnonzero(data.is_pos)
    if len(pos):
        t = stack_targets([
            encode_box(Box.from_seq(data.proposals[i]), Box.from_seq(data.gts[i]),
                       cfg.sigma, k, cfg.use_ignore, cfg.use_top2)
            for i in pos
        ])
        labels[pos], offsets[pos], valid[pos], in_range[pos] = t.labels, t.offsets, t.offset_valid, t.in_range
    return TargetArrays(labels, offsets, valid, in_range)


def _batch_step(head: Head, cfg: TrainConfig, feats, obj_labels, targets, deltas, pos_mask):
    w = LossWeights(0.0, cfg.lambda2)
    out = head.forward(feats)
    cls, d_obj, n_cls = objectness_loss(out.objectness_logit, obj_labels)
    if head.variant is Variant.SABL:
        buck, d_logits, n_b = bucketing_loss(targets, out.cls_logits, cfg.out_of_range_negative)
        reg, d_off, n_r = regression_loss(targets, out.offsets, cfg.beta)
        grads = head.backward(out, d_obj, d_logits=d_logits * w.lambda2, d_offsets=d_off * w.lambda2)
    else:
        buck, n_b = 0.0, 0
        reg, d_d, n_r = delta_loss(out.deltas, deltas, pos_mask, cfg.beta)
        grads = head.backward(out, d_obj, d_deltas=d_d * w.lambda2)
    total = total_loss(cls, buck, reg, w)
    if not math.isfinite(total):
        raise TrainingDiverged(f"non-finite loss {total} (cls={cls}, bucketing={buck}, reg={reg})")
    return grads, LossReport(cls, buck, reg, total, n_cls, n_b, n_r)


def train(
    cfg: TrainConfig,
    scene_cfg: SceneConfig,
    scenes: Sequence[Scene] | None = None,
    data: TrainingSet | None = None,
) -> tuple[Head, list[LossReport]]:
    """Train one head variant. Deterministic given the two configs' seeds."""
    head = Head.initialize(cfg.variant, cfg.head_config, cfg.seed)
    if cfg.epochs == 0:
        return head, []
    if data is None:
        if scenes is None:
            scenes = gen_scenes(scene_cfg, cfg.n_scenes)
        rcfg = RenderConfig(cfg.k, cfg.channels, cfg.sigma, scene_cfg.noise_std, scene_cfg.edge_scale)
        data = build_training_set(scenes, rcfg, scene_cfg.seed)
    obj_labels = data.is_pos.astype(np.float64)
    if cfg.variant is Variant.SABL:
        targets = _sabl_targets(data, cfg)
        deltas = None
    else:
        targets = None
        deltas = np.zeros((len(data.proposals), 4))
        pos = data.is_pos
        deltas[pos] = encode_deltas(data.proposals[pos], data.gts[pos], cfg.variant) / DELTA_STDS[cfg.variant]

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    pos_idx = np.flatnonzero(data.is_pos)
    neg_idx = np.flatnonzero(~data.is_pos)
    n_neg = min(len(neg_idx), int(round(cfg.neg_per_pos * len(pos_idx))))
    history = []
    for epoch in range(cfg.epochs):
        negs = rng.choice(neg_idx, size=n_neg, replace=False) if n_neg else neg_idx[:0]
        idx = rng.permutation(np.concatenate([pos_idx, negs]))
        sums = np.zeros(4)
        counts = np.zeros(3, dtype=np.int64)
        nb = 0
        for start in range(0, len(idx), cfg.batch_size):
            b = idx[start:start + cfg.batch_size]
            tb = targets.subset(b) if targets is not None else None
            db = deltas[b] if deltas is not None else None
            grads, rep = _batch_step(head, cfg, data.features[b], obj_labels[b], tb, db, data.is_pos[b])
            head.step(grads, cfg.lr, cfg.momentum)
            sums += (rep.cls, rep.bucketing, rep.reg, rep.total)
            counts += (rep.n_cls, rep.n_bucketing, rep.n_reg)
            nb += 1
        m = sums / max(nb, 1)
        history.append(LossReport(*m.tolist(), *(int(c) for c in counts)))
        log.debug("epoch %d %s loss %.5f", epoch, cfg.variant.value, m[3])
    return head, history


@dataclass
class SceneEval:
    gts: np.ndarray
    proposals: np.ndarray
    refined: np.ndarray
    scores: np.ndarray
    loc_conf: np.ndarray
    is_pos: np.ndarray


def evaluate_scene(head: Head, scene: Scene, rcfg: RenderConfig, scene_cfg: SceneConfig, rng) -> SceneEval:
    feats = render_batch(scene.proposals, scene_targets_gt(scene), rcfg, rng)
    out = head.forward(feats)
    boxes, loc = refine(head.variant, out, scene.proposals, rcfg.sigma)
    boxes = _clip(boxes, scene_cfg.image_w, scene_cfg.image_h)
    return SceneEval(scene.gts, scene.proposals, boxes, out.objectness, loc, scene.positive_mask)


def evaluate(head: Head, scenes: Sequence[Scene], rcfg: RenderConfig, scene_cfg: SceneConfig,
             seed: int, threads: int = 1) -> list[SceneEval]:
    def one(i):
        return evaluate_scene(head, scenes[i], rcfg, scene_cfg, scene_rng(seed, i, 2))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(len(scenes))))
    return [one(i) for i in range(len(scenes))]


def summarize(evals: Sequence[SceneEval], nms_iou: float = 0.5) -> dict:
    gts = [e.gts for e in evals]
    plain, rescored = [], []
    for e in evals:
        keep = evalkit.nms(e.refined, e.scores, nms_iou)
        plain.append((e.refined[keep], e.scores[keep]))
        keep_r, s_r = evalkit.rescoring_nms(e.refined, e.scores, e.loc_conf, nms_iou)
        rescored.append((e.refined[keep_r], s_r[keep_r]))
    ap_plain = {f"{t:.1f}": evalkit.average_precision(plain, gts, t).ap for t in evalkit.AP_THRESHOLDS}
    ap_resc = {f"{t:.1f}": evalkit.average_precision(rescored, gts, t).ap for t in evalkit.AP_THRESHOLDS}

    props = [e.proposals[e.is_pos] for e in evals]
    refined = [e.refined[e.is_pos] for e in evals]
    before, after = [], []
    for p, r, e in zip(props, refined, evals):
        if len(p):
            j, v = evalkit.nearest_gt(p, e.gts)
            before.extend(v.tolist())
            after.extend(iou_matrix(r, e.gts)[np.arange(len(r)), j].tolist())
    return {
        "ap_plain": ap_plain,
        "ap_rescoring": ap_resc,
        "ap_plain_mean": float(np.mean(list(ap_plain.values()))),
        "ap_rescoring_mean": float(np.mean(list(ap_resc.values()))),
        "mean_iou_before": float(np.mean(before)) if before else 0.0,
        "mean_iou_after": float(np.mean(after)) if after else 0.0,
        "iou_improvement": evalkit.iou_improvement_stats(props, refined, gts),
        "positive_counts": evalkit.positive_count_stats(refined, gts),
    }


@dataclass(frozen=True)
class BenchConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variants: tuple[Variant, ...] = (Variant.SABL, Variant.BOUNDARY_REG, Variant.BBOX_REG)
    seeds: tuple[int, ...] = (0, 1, 2)
    n_test_scenes: int = 200
    nms_iou: float = 0.5
    fig5_samples: int = 10000


FIG5_ASSUMPTION = ("bucketed displacement = left gt edge minus nearest left-side bucket centerline, "
                   "divided by gt width; gt edges outside the left half-region are excluded")


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(_jsonable(obj), sort_keys=True).encode()).hexdigest()


def code_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Variant):
        return obj.value
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def fig5_proposals(scene_cfg: SceneConfig, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Collect ``n`` jittered positive (proposal, gt) pairs."""
    cfg = replace(scene_cfg, distractors_per_scene=0)
    props, gts = [], []
    i = 0
    while len(props) < n:
        s = gen_scene(cfg, scene_rng(seed, i, 3))
        i += 1
        for p, m in zip(s.proposals, s.matches):
            if m >= 0:
                props.append(p)
                gts.append(s.gts[m])
    return np.array(props[:n]), np.array(gts[:n])


def run_seed(bench: BenchConfig, seed: int, threads: int = 1) -> dict:
    scene_cfg = replace(bench.scene, seed=seed)
    train_scenes = gen_scenes(scene_cfg, bench.train.n_scenes)
    test_scenes = gen_scenes(scene_cfg, bench.n_test_scenes, seed=seed + 1_000_003)
    rcfg = RenderConfig(bench.train.k, bench.train.channels, bench.train.sigma,
                        scene_cfg.noise_std, scene_cfg.edge_scale)
    data = build_training_set(train_scenes, rcfg, seed)
    results = {}
    for v in bench.variants:
        tcfg = replace(bench.train, variant=v, seed=seed)
        head, hist = train(tcfg, scene_cfg, data=data)
        evals = evaluate(head, test_scenes, rcfg, scene_cfg, seed, threads)
        res = summarize(evals, bench.nms_iou)
        res["loss_history"] = [asdict(r) for r in hist]
        results[v.value] = res
    return results


def pairwise_deltas(results: dict) -> dict:
    names = list(results)
    out = {}
    for a in names:
        for b in names:
            if a == b:
                continue
            ra, rb = results[a], results[b]
            out[f"{a}-{b}"] = {
                "ap_plain": {t: ra["ap_plain"][t] - rb["ap_plain"][t] for t in ra["ap_plain"]},
                "mean_iou_after": ra["mean_iou_after"] - rb["mean_iou_after"],
            }
    return out


def compare(bench: BenchConfig = BenchConfig(), threads: int = 1) -> dict:
    """Train every variant on identical scenes per seed and collect the report."""
    per_seed = {}
    for seed in bench.seeds:
        res = run_seed(bench, seed, threads)
        per_seed[str(seed)] = {"variants": res, "deltas": pairwise_deltas(res),
                               "rescoring_gain": {v: r["ap_rescoring_mean"] - r["ap_plain_mean"]
                                                  for v, r in res.items()}}
    p, g = fig5_proposals(bench.scene, bench.fig5_samples, bench.scene.seed)
    d5 = evalkit.displacement_stats(p, g, bench.train.sigma, bench.train.k)
    return {
        "meta": {
            "ap_interpolation": "101-point",
            "fig5_assumption": FIG5_ASSUMPTION,
            "config": _jsonable(bench),
            "config_hash": config_hash(bench),
            "code_hash": code_hash(),
        },
        "seeds": per_seed,
        "fig5": {"rows": d5.rows, "excluded_out_of_range": d5.excluded_out_of_range,
                 "max_bound_excess": d5.max_bound_excess, "n_samples": d5.n_samples},
    }


def report_to_json(report: dict) -> str:
    return json.dumps(_jsonable(report), sort_keys=True, indent=1)
