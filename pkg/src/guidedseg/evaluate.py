"""Positive-class IU, the (S,P) evaluation sweep, and the timing benchmark."""

from __future__ import annotations

import json
import time
from typing import Optional, Sequence

import numpy as np

from . import episodes as ep
from . import model
from .errors import ShapeError
from .shapes import DenseSample
from .tensor import Tensor


def positive_iu(pred: np.ndarray, target: np.ndarray) -> float:
    """Intersection over union of the positive class; empty union counts as 1."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    p = pred.astype(bool)
    t = target.astype(bool)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def _cell_rng(seed: int, s: int, p) -> np.random.Generator:
    return np.random.default_rng([seed, s, 0 if p == ep.DENSE else int(p)])


def run_episode(params: model.ModelParams, episode: ep.Episode) -> dict:
    """Segment one episode, timing guidance and inference separately."""
    support = [(Tensor(img), ann) for img, ann in episode.support]
    query = Tensor(episode.query)
    t0 = time.perf_counter()
    z = None if params.config.unguided else model.extract_guidance(support, params)
    t1 = time.perf_counter()
    qf = model.extract_features(query, params)
    logits = model.infer(qf, z, params,
                         out_size=(episode.query.shape[1], episode.query.shape[2]))
    mask = model.logits_to_mask(logits)
    t2 = time.perf_counter()
    return {
        "mask": mask,
        "iu": positive_iu(mask, episode.query_target),
        "guidance_ms": (t1 - t0) * 1e3,
        "infer_ms": (t2 - t1) * 1e3,
    }


def eval_fewshot(params: model.ModelParams,
                 dataset: Sequence[DenseSample],
                 mode: str,
                 s_list: Sequence[int],
                 p_list: Sequence,
                 episodes_per_cell: int = 200,
                 seed: int = 0,
                 allowed_classes: Optional[Sequence[int]] = None,
                 require_distractor: bool = False) -> dict:
    """Sweep the (S, P) grid; each cell draws its episodes from a fixed seed."""
    cells = []
    for s in s_list:
        for p in p_list:
            rng = _cell_rng(seed, s, p)
            ius, gts, its = [], [], []
            for _ in range(episodes_per_cell):
                episode = ep.sample_episode(dataset, mode, s, p, rng,
                                            allowed_classes=allowed_classes,
                                            require_distractor=require_distractor)
                out = run_episode(params, episode)
                ius.append(out["iu"])
                gts.append(out["guidance_ms"])
                its.append(out["infer_ms"])
            cells.append({
                "S": int(s),
                "P": p if p == ep.DENSE else int(p),
                "mean_iu": float(np.mean(ius)),
                "std_iu": float(np.std(ius)),
                "n": episodes_per_cell,
                "guidance_ms": float(np.median(gts)),
                "infer_ms": float(np.median(its)),
            })
    return {
        "config": {
            "mode": mode,
            "episodes_per_cell": episodes_per_cell,
            "seed": seed,
            "allowed_classes": (None if allowed_classes is None
                                else [int(c) for c in allowed_classes]),
            "require_distractor": require_distractor,
            "model": params.config.to_dict(),
        },
        "cells": cells,
        "baselines": {},
    }


def benchmark_timing(params: model.ModelParams, episode: ep.Episode,
                     reps: int = 20) -> dict:
    """Median full-forward time vs cached-feature annotation-update time.

    The update path re-pools guidance from cached support features and
    re-runs only the head on cached query features; early fusion has no
    such path, so only the full forward is reported for it.
    """
    support = [(Tensor(img), ann) for img, ann in episode.support]
    query = Tensor(episode.query)
    out_size = (episode.query.shape[1], episode.query.shape[2])

    def full():
        model.segment(support, query, params)

    full()  # warm caches and jit before timing
    full_ms = _time_reps(full, reps)

    if params.config.fusion == model.FUSION_EARLY:
        return {
            "full_forward_ms": full_ms["median"],
            "full_forward_spread_ms": full_ms["spread"],
            "guidance_update_ms": None,
            "ratio": None,
            "reps": reps,
            "note": "early fusion re-encodes on every annotation change",
        }

    feats = [model.extract_features(img, params) for img, _ in support]
    anns = [ann for _, ann in support]
    qf = model.extract_features(query, params)
    cached_base = (model.decode_base(qf, params)
                   if params.config.head == model.HEAD_FEATURE_FUSION else None)

    def update():
        z = model.update_guidance(feats, anns, params)
        logits = model.infer(qf, z, params, out_size=out_size,
                             cached_base=cached_base)
        model.logits_to_mask(logits)

    update()
    upd_ms = _time_reps(update, reps)
    return {
        "full_forward_ms": full_ms["median"],
        "full_forward_spread_ms": full_ms["spread"],
        "guidance_update_ms": upd_ms["median"],
        "guidance_update_spread_ms": upd_ms["spread"],
        "ratio": full_ms["median"] / upd_ms["median"],
        "reps": reps,
    }


def _time_reps(fn, reps: int) -> dict:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    q1, q3 = np.percentile(times, [25, 75])
    return {"median": float(np.median(times)), "spread": float(q3 - q1)}


def save_report(report: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
