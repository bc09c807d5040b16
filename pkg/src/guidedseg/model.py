"""The guided segmentation network.

A shared fully convolutional encoder turns images into feature maps; point
annotations on support images are rasterized to the feature grid, fused
with the features, and pooled into a compact task representation z. A
query is then segmented from (query features, z) alone, so the support can
be discarded after guidance extraction and z can be recomputed cheaply
when annotations change (the encoder output is cached, only the
rasterize-and-pool step reruns).

Three interchangeable inference heads consume z:

  feature_fusion    tile z over space, concatenate with query features,
                    decode with a small conv stack
  param_regression  regress a 1x1 classifier kernel and bias from z
  prototype         nearest-prototype classification in feature space

plus an early-fusion variant that stacks annotation planes onto the image
and encodes them jointly (no cheap update path, by construction).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import ops
from .errors import (
    ConfigError,
    ContractError,
    DegenerateSupportError,
    ShapeError,
)
from .tensor import Tensor

FUSION_LATE = "late"
FUSION_EARLY = "early"
LOCALITY_GLOBAL = "global_pool"
LOCALITY_IDENTITY = "identity"
HEAD_FEATURE_FUSION = "feature_fusion"
HEAD_PARAM_REGRESSION = "param_regression"
HEAD_PROTOTYPE = "prototype"

DEFAULT_ENCODER_SPEC = ((16, 3, 2), (32, 3, 2), (32, 3, 1))
DECODER_WIDTH = 32


# ---------------------------------------------------------------------------
# annotations

@dataclass(frozen=True)
class Annotation:
    """One labelled point in input-pixel coordinates."""
    row: int
    col: int
    positive: bool


class AnnotationSet:
    """An immutable set of labelled points on one image.

    Points must lie inside the image and no two may share a coordinate.
    """

    __slots__ = ("points", "image_size")

    def __init__(self, points: Sequence[Annotation], image_size: tuple[int, int]):
        h, w = image_size
        seen: set[tuple[int, int]] = set()
        for p in points:
            if not (0 <= p.row < h and 0 <= p.col < w):
                raise ContractError(
                    f"annotation ({p.row},{p.col}) outside {h}x{w} image")
            if (p.row, p.col) in seen:
                raise ContractError(
                    f"duplicate annotation at ({p.row},{p.col})")
            seen.add((p.row, p.col))
        self.points = tuple(points)
        self.image_size = (int(h), int(w))

    def __len__(self) -> int:
        return len(self.points)

    def __repr__(self) -> str:
        pos = sum(p.positive for p in self.points)
        return f"AnnotationSet({pos}+/{len(self.points) - pos}- on {self.image_size})"

    def with_point(self, row: int, col: int, positive: bool) -> "AnnotationSet":
        """Copy with one point added or relabelled (last write wins)."""
        kept = [p for p in self.points if (p.row, p.col) != (row, col)]
        kept.append(Annotation(int(row), int(col), bool(positive)))
        return AnnotationSet(kept, self.image_size)


def dense_annotations(label_map: np.ndarray) -> AnnotationSet:
    """Annotate every pixel of a binary {0,1} map."""
    h, w = label_map.shape
    pts = [Annotation(r, c, bool(label_map[r, c]))
           for r in range(h) for c in range(w)]
    return AnnotationSet(pts, (h, w))


# ---------------------------------------------------------------------------
# configuration and parameters

@dataclass(frozen=True)
class GuidanceConfig:
    fusion: str = FUSION_LATE
    locality: str = LOCALITY_GLOBAL
    head: str = HEAD_FEATURE_FUSION
    encoder_spec: tuple[tuple[int, int, int], ...] = DEFAULT_ENCODER_SPEC
    feature_stride: int = 4
    tau: float = 1.0
    unguided: bool = False

    def __post_init__(self):
        if self.fusion not in (FUSION_LATE, FUSION_EARLY):
            raise ConfigError(f"unknown fusion '{self.fusion}'")
        if self.locality not in (LOCALITY_GLOBAL, LOCALITY_IDENTITY):
            raise ConfigError(f"unknown locality '{self.locality}'")
        if self.head not in (HEAD_FEATURE_FUSION, HEAD_PARAM_REGRESSION, HEAD_PROTOTYPE):
            raise ConfigError(f"unknown head '{self.head}'")
        strides = 1
        for ch, k, s in self.encoder_spec:
            if ch < 1 or k < 1 or s < 1 or k % 2 == 0:
                raise ConfigError(f"bad encoder layer ({ch},{k},{s}); kernels must be odd")
            strides *= s
        if strides != self.feature_stride:
            raise ConfigError(
                f"feature_stride {self.feature_stride} != product of encoder strides {strides}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.fusion == FUSION_EARLY and self.head == HEAD_PROTOTYPE:
            raise ConfigError(
                "early fusion pools one joint vector; the prototype head needs "
                "separate positive and negative prototypes")
        if self.locality == LOCALITY_IDENTITY and self.head != HEAD_FEATURE_FUSION:
            raise ConfigError(
                f"identity locality produces spatial guidance, which the "
                f"{self.head} head cannot consume")
        if self.unguided and (self.fusion != FUSION_LATE or self.head != HEAD_FEATURE_FUSION):
            raise ConfigError("the unguided baseline uses late fusion with the feature_fusion head")

    @property
    def channels(self) -> int:
        return self.encoder_spec[-1][0]

    def to_dict(self) -> dict:
        return {
            "fusion": self.fusion,
            "locality": self.locality,
            "head": self.head,
            "encoder_spec": [list(l) for l in self.encoder_spec],
            "feature_stride": self.feature_stride,
            "tau": self.tau,
            "unguided": self.unguided,
        }

    @staticmethod
    def from_dict(d: dict) -> "GuidanceConfig":
        try:
            return GuidanceConfig(
                fusion=d["fusion"],
                locality=d["locality"],
                head=d["head"],
                encoder_spec=tuple(tuple(l) for l in d["encoder_spec"]),
                feature_stride=int(d["feature_stride"]),
                tau=float(d["tau"]),
                unguided=bool(d.get("unguided", False)),
            )
        except KeyError as e:
            raise ConfigError(f"config missing field {e}") from e


@dataclass(frozen=True)
class TaskRepresentation:
    """Latent task state extracted from annotated support images."""
    kind: str                                  # "global" or "local"
    feature_size: tuple[int, int]
    shots_merged: int = 1
    z_pos: Optional[Tensor] = None             # global: [C]
    z_neg: Optional[Tensor] = None
    pos_count: float = 0.0
    neg_count: float = 0.0
    g_pos: Optional[Tensor] = None             # local: [C,h,w]
    g_neg: Optional[Tensor] = None


@dataclass
class ModelParams:
    params: dict[str, Tensor]
    config: GuidanceConfig

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                fan_in: int) -> Tensor:
    # fan-in scaling: every layer here feeds a relu
    limit = np.sqrt(6.0 / fan_in)
    data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


def _conv_layer(rng, params, name, c_in, c_out, k):
    params[f"{name}.w"] = _he_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
    params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)


def decoder_in_channels(config: GuidanceConfig) -> int:
    if config.unguided:
        return config.channels
    return 3 * config.channels


def init_params(config: GuidanceConfig, seed: int = 0) -> ModelParams:
    """Fresh parameters: uniform +-sqrt(6/fan_in) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    c_in = 3
    for i, (ch, k, _) in enumerate(config.encoder_spec, start=1):
        _conv_layer(rng, params, f"enc{i}", c_in, ch, k)
        c_in = ch
    c = config.channels
    if config.fusion == FUSION_EARLY:
        c_in = 5
        for i, (ch, k, _) in enumerate(config.encoder_spec, start=1):
            _conv_layer(rng, params, f"early{i}", c_in, ch, k)
            c_in = ch
    if config.head == HEAD_FEATURE_FUSION:
        _conv_layer(rng, params, "dec1", decoder_in_channels(config), DECODER_WIDTH, 3)
        _conv_layer(rng, params, "dec2", DECODER_WIDTH, DECODER_WIDTH, 3)
        _conv_layer(rng, params, "out", DECODER_WIDTH, 2, 1)
    elif config.head == HEAD_PARAM_REGRESSION:
        d_in, d_hid, d_out = 2 * c + 2, 2 * c, 2 * c + 2
        params["reg1.w"] = _he_uniform(rng, (d_hid, d_in), d_in)
        params["reg1.b"] = Tensor(np.zeros(d_hid, dtype=np.float32), requires_grad=True)
        params["reg2.w"] = _he_uniform(rng, (d_out, d_hid), d_hid)
        params["reg2.b"] = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)
    return ModelParams(params=params, config=config)


# ---------------------------------------------------------------------------
# encoding and rasterization

def extract_features(image: Tensor, params: ModelParams, encoder: str = "enc") -> Tensor:
    """Run the shared encoder; input extents must be multiples of the stride."""
    cfg = params.config
    if image.ndim != 3:
        raise ShapeError(f"expected [C,H,W] image, got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    s = cfg.feature_stride
    if h % s or w % s:
        raise ContractError(
            f"image size {h}x{w} not divisible by feature stride {s}; pad first")
    x = image
    for i, (_, k, stride) in enumerate(cfg.encoder_spec, start=1):
        x = ops.relu(ops.conv2d(x, params[f"{encoder}{i}.w"], params[f"{encoder}{i}.b"],
                                stride=stride, pad=k // 2))
    return x


def pad_to_multiple(image: np.ndarray, stride: int) -> np.ndarray:
    """Zero-pad bottom/right so both extents divide by `stride`."""
    c, h, w = image.shape
    h2 = -(-h // stride) * stride
    w2 = -(-w // stride) * stride
    if (h2, w2) == (h, w):
        return image
    out = np.zeros((c, h2, w2), dtype=np.float32)
    out[:, :h, :w] = image
    return out


def rasterize_annotations(ann: AnnotationSet, feature_size: tuple[int, int],
                          stride: int) -> tuple[Tensor, Tensor]:
    """Nearest-cell point masks on the feature grid, one per polarity.

    A pixel (r,c) marks cell (r//stride, c//stride); cells stay binary no
    matter how many points land in them.
    """
    fh, fw = feature_size
    h, w = ann.image_size
    if -(-h // stride) > fh or -(-w // stride) > fw:
        raise ShapeError(
            f"feature grid {fh}x{fw} cannot hold {h}x{w} image at stride {stride}")
    pos = np.zeros((1, fh, fw), dtype=np.float32)
    neg = np.zeros((1, fh, fw), dtype=np.float32)
    for p in ann.points:
        (pos if p.positive else neg)[0, p.row // stride, p.col // stride] = 1.0
    return Tensor(pos), Tensor(neg)


# ---------------------------------------------------------------------------
# guidance extraction

def guide_late(features: Tensor, masks: tuple[Tensor, Tensor],
               locality: str = LOCALITY_GLOBAL) -> TaskRepresentation:
    """Fuse support features with annotation masks, then localize.

    Global pooling averages masked features into one vector per polarity;
    identity keeps the masked maps in place (support and query must then
    share spatial registration).
    """
    mask_pos, mask_neg = masks
    fh, fw = features.shape[1], features.shape[2]
    if mask_pos.shape != (1, fh, fw) or mask_neg.shape != (1, fh, fw):
        raise ShapeError(
            f"masks {mask_pos.shape}/{mask_neg.shape} do not match features {features.shape}")
    if locality == LOCALITY_GLOBAL:
        z_pos, n_pos = ops.masked_average(features, mask_pos)
        z_neg, n_neg = ops.masked_average(features, mask_neg)
        return TaskRepresentation(
            kind="global", feature_size=(fh, fw),
            z_pos=z_pos, z_neg=z_neg, pos_count=n_pos, neg_count=n_neg)
    if locality == LOCALITY_IDENTITY:
        return TaskRepresentation(
            kind="local", feature_size=(fh, fw),
            g_pos=ops.elementwise_mul(features, mask_pos),
            g_neg=ops.elementwise_mul(features, mask_neg))
    raise ConfigError(f"unknown locality '{locality}'")


def guide_early(image: Tensor, ann: AnnotationSet, params: ModelParams) -> TaskRepresentation:
    """Encode image plus per-polarity point planes jointly, then pool.

    The pooled vector fills both polarity slots of the representation; it
    carries no separate negative signal.
    """
    if params.config.fusion != FUSION_EARLY or "early1.w" not in params.params:
        raise ConfigError("early-fusion encoder not present in this model")
    h, w = image.shape[1], image.shape[2]
    planes = np.zeros((2, h, w), dtype=np.float32)
    for p in ann.points:
        planes[0 if p.positive else 1, p.row, p.col] = 1.0
    stacked = ops.concat_channels([image, Tensor(planes)])
    feats = extract_features(stacked, params, encoder="early")
    fh, fw = feats.shape[1], feats.shape[2]
    z, count = ops.masked_average(feats, Tensor(np.ones((1, fh, fw), dtype=np.float32)))
    return TaskRepresentation(
        kind="global", feature_size=(fh, fw),
        z_pos=z, z_neg=z, pos_count=count, neg_count=count)


def merge_shots(reps: Sequence[TaskRepresentation]) -> TaskRepresentation:
    """Count-weighted merge of per-shot global representations.

    Equivalent to pooling all shots' annotated cells jointly; a shot with
    one empty polarity contributes nothing to that polarity. A single
    representation passes through unchanged.
    """
    if not reps:
        raise ContractError("merge_shots needs at least one representation")
    if len(reps) == 1:
        return reps[0]
    for r in reps:
        if r.kind != "global":
            raise ContractError("only global representations can be merged across shots")
    fs = reps[0].feature_size

    def merge_side(vectors, counts):
        total = float(sum(counts))
        if total == 0.0:
            return Tensor(np.zeros_like(vectors[0].data)), 0.0
        live = [(v, c) for v, c in zip(vectors, counts) if c > 0]
        merged = ops.weighted_sum([v for v, _ in live], [c / total for _, c in live])
        return merged, total

    z_pos, n_pos = merge_side([r.z_pos for r in reps], [r.pos_count for r in reps])
    z_neg, n_neg = merge_side([r.z_neg for r in reps], [r.neg_count for r in reps])
    return TaskRepresentation(
        kind="global", feature_size=fs,
        shots_merged=sum(r.shots_merged for r in reps),
        z_pos=z_pos, z_neg=z_neg, pos_count=n_pos, neg_count=n_neg)


# ---------------------------------------------------------------------------
# inference heads

def decode_base(query_feat: Tensor, params: ModelParams) -> Tensor:
    """The query-only term of the first decoder layer (pre-activation).

    Guidance enters the first layer additively, so this term can be cached
    per frame and reused across annotation changes.
    """
    c = params.config.channels
    if params.config.unguided:
        wq = params["dec1.w"]
    else:
        wq = ops.slice_in_channels(params["dec1.w"], 0, c)
    return ops.conv2d(query_feat, wq, params["dec1.b"], stride=1, pad=1)


def _decode_tail(h1: Tensor, params: ModelParams, out_size: tuple[int, int]) -> Tensor:
    x = ops.relu(ops.conv2d(h1, params["dec2.w"], params["dec2.b"], stride=1, pad=1))
    logits = ops.conv2d(x, params["out.w"], params["out.b"], stride=1, pad=0)
    return ops.bilinear_resize(logits, out_size[0], out_size[1])


def infer_feature_fusion(query_feat: Tensor, z: Optional[TaskRepresentation],
                         params: ModelParams, out_size: Optional[tuple[int, int]] = None,
                         cached_base: Optional[Tensor] = None) -> Tensor:
    """Decode query features fused with the task representation.

    Global z enters as two constant-map convolution terms added onto the
    query term of the first layer; local z is concatenated spatially. The
    additive form is used in training and inference alike, so a cached
    query term gives bit-identical logits to a from-scratch pass.
    """
    cfg = params.config
    if cfg.head != HEAD_FEATURE_FUSION:
        raise ConfigError(f"model head is {cfg.head}, not feature_fusion")
    c = cfg.channels
    fh, fw = query_feat.shape[1], query_feat.shape[2]
    if out_size is None:
        out_size = (fh * cfg.feature_stride, fw * cfg.feature_stride)

    if cfg.unguided:
        base = cached_base if cached_base is not None else decode_base(query_feat, params)
        return _decode_tail(ops.relu(base), params, out_size)

    if z is None:
        raise ContractError("guided inference needs a task representation")
    if z.kind == "local":
        if z.feature_size != (fh, fw):
            raise ContractError(
                f"local guidance {z.feature_size} does not match query features {(fh, fw)}")
        fused = ops.concat_channels([query_feat, z.g_pos, z.g_neg])
        h1 = ops.relu(ops.conv2d(fused, params["dec1.w"], params["dec1.b"], stride=1, pad=1))
        return _decode_tail(h1, params, out_size)

    base = cached_base if cached_base is not None else decode_base(query_feat, params)
    wp = ops.slice_in_channels(params["dec1.w"], c, 2 * c)
    wn = ops.slice_in_channels(params["dec1.w"], 2 * c, 3 * c)
    pre = ops.add(ops.add(base, ops.const_conv2d(z.z_pos, wp, fh, fw, pad=1)),
                  ops.const_conv2d(z.z_neg, wn, fh, fw, pad=1))
    return _decode_tail(ops.relu(pre), params, out_size)


def infer_param_regression(query_feat: Tensor, z: TaskRepresentation,
                           params: ModelParams,
                           out_size: Optional[tuple[int, int]] = None) -> Tensor:
    """Regress a per-task 1x1 classifier from z and apply it to the query."""
    cfg = params.config
    if cfg.head != HEAD_PARAM_REGRESSION:
        raise ConfigError(f"model head is {cfg.head}, not param_regression")
    if z.kind != "global":
        raise ContractError("parameter regression needs a pooled (global) representation")
    c = cfg.channels
    fh, fw = query_feat.shape[1], query_feat.shape[2]
    if out_size is None:
        out_size = (fh * cfg.feature_stride, fw * cfg.feature_stride)
    zc = ops.concat_vector([z.z_pos, z.z_neg], extras=[z.pos_count, z.neg_count])
    hid = ops.relu(ops.affine(params["reg1.w"], zc, params["reg1.b"]))
    outv = ops.affine(params["reg2.w"], hid, params["reg2.b"])
    kernel = ops.reshape(ops.vector_slice(outv, 0, 2 * c), (2, c, 1, 1))
    bias = ops.vector_slice(outv, 2 * c, 2 * c + 2)
    logits = ops.conv2d(query_feat, kernel, bias, stride=1, pad=0)
    return ops.bilinear_resize(logits, out_size[0], out_size[1])


def infer_prototype(query_feat: Tensor, z: TaskRepresentation,
                    params: ModelParams,
                    out_size: Optional[tuple[int, int]] = None) -> Tensor:
    """Classify each cell by squared distance to the two pooled prototypes."""
    cfg = params.config
    if cfg.head != HEAD_PROTOTYPE:
        raise ConfigError(f"model head is {cfg.head}, not prototype")
    if z.kind != "global":
        raise ContractError("the prototype head needs a pooled (global) representation")
    if z.pos_count <= 0 or z.neg_count <= 0:
        raise DegenerateSupportError(
            f"prototype head needs both polarities annotated, got counts "
            f"({z.pos_count}, {z.neg_count})")
    fh, fw = query_feat.shape[1], query_feat.shape[2]
    if out_size is None:
        out_size = (fh * cfg.feature_stride, fw * cfg.feature_stride)
    logits = ops.prototype_logits(query_feat, z.z_pos, z.z_neg, tau=cfg.tau)
    return ops.bilinear_resize(logits, out_size[0], out_size[1])


def infer(query_feat: Tensor, z: Optional[TaskRepresentation], params: ModelParams,
          out_size: Optional[tuple[int, int]] = None,
          cached_base: Optional[Tensor] = None) -> Tensor:
    """Dispatch to the configured head; returns [2,H,W] logits."""
    head = params.config.head
    if head == HEAD_FEATURE_FUSION:
        return infer_feature_fusion(query_feat, z, params, out_size, cached_base)
    if head == HEAD_PARAM_REGRESSION:
        return infer_param_regression(query_feat, z, params, out_size)
    return infer_prototype(query_feat, z, params, out_size)


# ---------------------------------------------------------------------------
# end-to-end segmentation

def extract_guidance(support: Sequence[tuple[Tensor, AnnotationSet]],
                     params: ModelParams,
                     locality: Optional[str] = None) -> TaskRepresentation:
    """Encode and pool all support shots into one task representation."""
    if not support:
        raise ContractError("need at least one support item")
    cfg = params.config
    loc = locality or cfg.locality
    if cfg.fusion == FUSION_EARLY:
        reps = [guide_early(img, ann, params) for img, ann in support]
        return merge_shots(reps)
    if loc == LOCALITY_IDENTITY and len(support) > 1:
        raise ContractError("identity locality is single-image by definition")
    reps = []
    for img, ann in support:
        feats = extract_features(img, params)
        masks = rasterize_annotations(ann, (feats.shape[1], feats.shape[2]),
                                      cfg.feature_stride)
        reps.append(guide_late(feats, masks, loc))
    return merge_shots(reps)


def logits_to_mask(logits: Tensor) -> np.ndarray:
    """Argmax over the two channels; ties resolve to the negative class."""
    return (logits.data[1] > logits.data[0]).astype(np.uint8)


def segment(support: Sequence[tuple[Tensor, AnnotationSet]], query: Tensor,
            params: ModelParams,
            locality: Optional[str] = None) -> tuple[np.ndarray, Tensor]:
    """Full pipeline: guidance from support, prediction on the query.

    Returns (binary mask [H,W], logits [2,H,W]) at query resolution. Query
    sizes that do not divide the feature stride are zero-padded for
    encoding and the output is cropped back.
    """
    cfg = params.config
    h, w = query.shape[1], query.shape[2]
    padded = pad_to_multiple(query.data, cfg.feature_stride)
    qt = Tensor(padded) if padded is not query.data else query
    query_feat = extract_features(qt, params)
    z = None if cfg.unguided else extract_guidance(support, params, locality)
    logits = infer(query_feat, z, params,
                   out_size=(qt.shape[1], qt.shape[2]))
    if (qt.shape[1], qt.shape[2]) != (h, w):
        logits = ops.crop_spatial(logits, h, w)
    return logits_to_mask(logits), logits


def update_guidance(cached_features: Sequence[Tensor],
                    annotations: Sequence[AnnotationSet],
                    params: ModelParams,
                    locality: Optional[str] = None) -> TaskRepresentation:
    """Recompute the task representation from cached support features.

    Reruns only rasterization and pooling over the full current annotation
    sets; produces exactly what extract_guidance would, without touching
    the encoder. Early fusion has no such shortcut: the annotation planes
    feed the encoder itself.
    """
    cfg = params.config
    if cfg.fusion == FUSION_EARLY:
        raise ConfigError(
            "early fusion encodes annotations jointly with the image; "
            "guidance cannot be updated without a full forward pass")
    if len(cached_features) != len(annotations):
        raise ContractError(
            f"{len(cached_features)} feature maps vs {len(annotations)} annotation sets")
    if not cached_features:
        raise ContractError("need at least one support item")
    loc = locality or cfg.locality
    if loc == LOCALITY_IDENTITY and len(cached_features) > 1:
        raise ContractError("identity locality is single-image by definition")
    reps = []
    for feats, ann in zip(cached_features, annotations):
        masks = rasterize_annotations(ann, (feats.shape[1], feats.shape[2]),
                                      cfg.feature_stride)
        reps.append(guide_late(feats, masks, loc))
    return merge_shots(reps)
