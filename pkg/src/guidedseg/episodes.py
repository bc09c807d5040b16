"""Episode synthesis: binary (S,P)-shot tasks drawn from dense samples.

A task is a class (semantic mode) or an instance (interactive and video
modes). Support images carry sparse point annotations sampled uniformly
from the task region and its complement; the query keeps its dense binary
target for loss and scoring.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DatasetTooSmallError, NoPositiveRegionError
from .model import Annotation, AnnotationSet, dense_annotations
from .shapes import DenseSample

MODE_SEMANTIC = "semantic"
MODE_INTERACTIVE = "interactive"
MODE_VIDEO = "video"
MODES = (MODE_SEMANTIC, MODE_INTERACTIVE, MODE_VIDEO)

DENSE = "dense"
PointBudget = Union[int, str]

# circle+hue4 and triangle+hue0: each shape and each hue also occurs in the
# training classes under a different pairing, so the held-out test measures
# recognition of novel combinations rather than extrapolation to colors the
# encoder has never seen
DEFAULT_HELDOUT_CLASSES = (2, 7)


@dataclass
class Episode:
    support: list[tuple[np.ndarray, AnnotationSet]]
    query: np.ndarray
    query_target: np.ndarray                 # [H,W] uint8 {0,1}
    task_descriptor: tuple[str, int]
    shot_params: tuple[int, PointBudget]
    support_frames: Optional[tuple[int, ...]] = None   # video mode only
    query_frame: Optional[int] = None


def binarize(sample: DenseSample, descriptor: tuple[str, int]) -> np.ndarray:
    """1 on the task's pixels, 0 elsewhere.

    Semantic tasks take the union of all instances of the class; instance
    tasks (interactive, video) take that instance's pixels alone.
    """
    mode, task_id = descriptor
    labels = sample.label_map
    if mode == MODE_SEMANTIC:
        ids = [i for i, c in sample.instance_classes.items() if c == task_id]
        out = np.isin(labels, ids)
    elif mode in (MODE_INTERACTIVE, MODE_VIDEO):
        out = labels == task_id
    else:
        raise ConfigError(f"unknown task mode '{mode}'")
    return out.astype(np.uint8)


def sparsify(binary_target: np.ndarray, p: int, rng: np.random.Generator) -> AnnotationSet:
    """Sample at most `p` labelled points, split evenly between polarities.

    ceil(p/2) positives come uniformly without replacement from the
    1-region, the rest negatives from the 0-region; a short region yields
    its quota to the other, so fewer than `p` points appear only when the
    image has fewer than `p` pixels.
    """
    if p < 1:
        raise ConfigError(f"point budget must be >= 1, got {p}")
    h, w = binary_target.shape
    flat = binary_target.reshape(-1)
    ones = np.flatnonzero(flat)
    zeros = np.flatnonzero(flat == 0)
    if ones.size == 0:
        raise NoPositiveRegionError("binary target has no positive pixels")
    q_pos = math.ceil(p / 2)
    q_neg = p - q_pos
    take_pos = min(q_pos, ones.size)
    take_neg = min(q_neg, zeros.size)
    spare = p - take_pos - take_neg
    if spare > 0:
        extra = min(spare, ones.size - take_pos)
        take_pos += extra
        spare -= extra
        take_neg += min(spare, zeros.size - take_neg)
    points = []
    if take_pos:
        for i in rng.choice(ones, size=take_pos, replace=False):
            points.append(Annotation(int(i // w), int(i % w), True))
    if take_neg:
        for i in rng.choice(zeros, size=take_neg, replace=False):
            points.append(Annotation(int(i // w), int(i % w), False))
    return AnnotationSet(points, (h, w))


def _annotate(binary: np.ndarray, p: PointBudget, rng) -> AnnotationSet:
    if p == DENSE:
        return dense_annotations(binary)
    return sparsify(binary, int(p), rng)


def still_samples(samples: Sequence[DenseSample]) -> list[DenseSample]:
    return [s for s in samples if s.sequence_id is None]


def sequences(samples: Sequence[DenseSample]) -> dict[int, list[DenseSample]]:
    by_seq: dict[int, list[DenseSample]] = defaultdict(list)
    for s in samples:
        if s.sequence_id is not None:
            by_seq[s.sequence_id].append(s)
    return {k: sorted(v, key=lambda s: s.frame_index) for k, v in by_seq.items()}


def _distractor_present(sample: DenseSample, mode: str, task_id: int) -> bool:
    if mode == MODE_SEMANTIC:
        return any(c != task_id for c in sample.instance_classes.values())
    present = set(np.unique(sample.label_map)) - {0}
    return len(present) >= 2


def sample_episode(samples: Sequence[DenseSample], mode: str, s: int,
                   p: PointBudget, rng: np.random.Generator,
                   allowed_classes: Optional[Sequence[int]] = None,
                   require_distractor: bool = False) -> Episode:
    """Draw one (S,P)-shot episode of the given mode, uniformly over tasks."""
    if mode not in MODES:
        raise ConfigError(f"unknown task mode '{mode}'")
    if s < 1:
        raise ConfigError(f"support size must be >= 1, got {s}")

    if mode == MODE_SEMANTIC:
        return _sample_semantic(samples, s, p, rng, allowed_classes, require_distractor)
    if mode == MODE_INTERACTIVE:
        return _sample_interactive(samples, s, p, rng, require_distractor)
    return _sample_video(samples, s, p, rng, require_distractor)


def _sample_semantic(samples, s, p, rng, allowed_classes, require_distractor):
    stills = still_samples(samples)
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, smp in enumerate(stills):
        for c in set(smp.instance_classes.values()):
            if allowed_classes is None or c in allowed_classes:
                by_class[c].append(i)
    eligible = sorted(c for c, idxs in by_class.items() if len(idxs) >= s + 1)
    if not eligible:
        raise DatasetTooSmallError(
            f"no class appears in {s + 1}+ still images (have {len(stills)} stills)")
    for _ in range(200):
        cls = int(eligible[rng.integers(0, len(eligible))])
        idxs = by_class[cls]
        chosen = rng.choice(len(idxs), size=s + 1, replace=False)
        query = stills[idxs[chosen[-1]]]
        if require_distractor and not _distractor_present(query, MODE_SEMANTIC, cls):
            continue
        desc = (MODE_SEMANTIC, cls)
        support = []
        for k in chosen[:-1]:
            smp = stills[idxs[k]]
            support.append((smp.image, _annotate(binarize(smp, desc), p, rng)))
        return Episode(support, query.image, binarize(query, desc), desc, (s, p))
    raise DatasetTooSmallError("no semantic episode with a distractor object found")


def _sample_interactive(samples, s, p, rng, require_distractor):
    if s != 1:
        raise ConfigError("interactive episodes use exactly one support shot "
                          "(the support image is the query image)")
    stills = still_samples(samples)
    pairs = []
    for i, smp in enumerate(stills):
        ids = sorted(set(np.unique(smp.label_map)) - {0})
        if require_distractor and len(ids) < 2:
            continue
        pairs.extend((i, inst) for inst in ids)
    if not pairs:
        raise DatasetTooSmallError("no (image, instance) pairs available")
    i, inst = pairs[int(rng.integers(0, len(pairs)))]
    smp = stills[i]
    desc = (MODE_INTERACTIVE, int(inst))
    binary = binarize(smp, desc)
    return Episode([(smp.image, _annotate(binary, p, rng))],
                   smp.image, binary, desc, (s, p))


def _sample_video(samples, s, p, rng, require_distractor):
    by_seq = sequences(samples)
    eligible = sorted(k for k, frames in by_seq.items() if len(frames) >= s + 1)
    if not eligible:
        raise DatasetTooSmallError(f"no video sequence has {s + 1}+ frames")
    for _ in range(200):
        seq = by_seq[eligible[int(rng.integers(0, len(eligible)))]]
        qf = int(rng.integers(s, len(seq)))
        query = seq[qf]
        ids = sorted(set(np.unique(query.label_map)) - {0})
        if not ids or (require_distractor and len(ids) < 2):
            continue
        inst = int(ids[rng.integers(0, len(ids))])
        desc = (MODE_VIDEO, inst)
        frame_idx = sorted(rng.choice(qf, size=s, replace=False))
        support = []
        ok = True
        for t in frame_idx:
            binary = binarize(seq[t], desc)
            if not binary.any():
                ok = False
                break
            support.append((seq[t].image, _annotate(binary, p, rng)))
        if not ok:
            continue
        return Episode(support, query.image, binarize(query, desc), desc, (s, p),
                       support_frames=tuple(int(t) for t in frame_idx),
                       query_frame=qf)
    raise DatasetTooSmallError("could not sample a valid video episode")
