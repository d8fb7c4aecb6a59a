"""Cross-attention connector: compress a patch grid into a few tokens and
predict hand/object boxes from typed queries.

One cross-attention block: learnable queries attend over projected patch
features. The first ``m`` (visual) query outputs pass a d-projection and
become the compressed tokens; the two hand queries and ``k`` object queries
share a small MLP head emitting a box in center format plus an objectness
score. Training pairs a language-modeling loss (through a frozen caption
readout) with a matched GIoU + L1 box loss; gradients are written out by
hand and checked against central differences.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .types import BBox

_MATCH_TIE_TOL = 1e-9


class TrainingDivergence(RuntimeError):
    """Loss became non-finite during training."""


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------

@dataclass
class PatchGrid:
    """Square grid of patch feature vectors, flattened row-major to (side^2, dim)."""

    patches: np.ndarray
    side: int = 16

    def validate(self) -> "PatchGrid":
        if self.patches.ndim != 2 or self.patches.shape[0] != self.side * self.side:
            raise ValueError(
                f"expected {self.side * self.side} patches, got shape {self.patches.shape}")
        if not np.all(np.isfinite(self.patches)):
            raise ValueError("patch features must be finite")
        return self

    @property
    def dim(self) -> int:
        return self.patches.shape[1]


@dataclass
class QuerySet:
    """Learnable queries: m visual, exactly 2 hand, k >= 1 object."""

    q_v: np.ndarray  # (m, d)
    q_h: np.ndarray  # (2, d)
    q_o: np.ndarray  # (k, d)

    def validate(self) -> "QuerySet":
        if self.q_h.shape[0] != 2:
            raise ValueError("exactly two hand queries required")
        if self.q_o.shape[0] < 1:
            raise ValueError("at least one object query required")
        return self

    @property
    def m(self) -> int:
        return self.q_v.shape[0]

    @property
    def k(self) -> int:
        return self.q_o.shape[0]


@dataclass
class ConnectorWeights:
    """Projection heads for keys/values, the token projection, and the box MLP."""

    w_k: np.ndarray  # (D, d)
    w_v: np.ndarray  # (D, d)
    w_z: np.ndarray  # (d, d)
    w1: np.ndarray   # (d, d_mlp)
    b1: np.ndarray   # (d_mlp,)
    w2: np.ndarray   # (d_mlp, 5)
    b2: np.ndarray   # (5,)


@dataclass
class ConnectorOutput:
    tokens: np.ndarray          # (m, d) compressed tokens
    boxes: List[BBox]           # 2 + k predicted boxes (hands first)
    scores: np.ndarray          # (2 + k,) objectness in [0, 1]
    attn: np.ndarray            # (m + 2 + k, n_patches) attention rows


PARAM_KEYS = ("q_v", "q_h", "q_o", "w_k", "w_v", "w_z", "w1", "b1", "w2", "b2")


def init_connector(feat_dim: int, d: int, m: int, k: int, d_mlp: int,
                   seed: int) -> Dict[str, np.ndarray]:
    """Seeded trainable parameter set for the connector."""
    if m < 0 or k < 1:
        raise ValueError("need m >= 0 and k >= 1")
    rng = np.random.default_rng(seed)

    def unif(fan_in, *shape):
        lim = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    return {
        "q_v": unif(d, m, d),
        "q_h": unif(d, 2, d),
        "q_o": unif(d, k, d),
        "w_k": unif(feat_dim, feat_dim, d),
        "w_v": unif(feat_dim, feat_dim, d),
        "w_z": unif(d, d, d),
        "w1": unif(d, d, d_mlp),
        "b1": np.zeros(d_mlp),
        "w2": unif(d_mlp, d_mlp, 5),
        "b2": np.zeros(5),
    }


def query_set(params: Dict[str, np.ndarray]) -> QuerySet:
    return QuerySet(params["q_v"], params["q_h"], params["q_o"]).validate()


def connector_weights(params: Dict[str, np.ndarray]) -> ConnectorWeights:
    return ConnectorWeights(params["w_k"], params["w_v"], params["w_z"],
                            params["w1"], params["b1"], params["w2"], params["b2"])


def params_from(queries: QuerySet, weights: ConnectorWeights) -> Dict[str, np.ndarray]:
    return {
        "q_v": queries.q_v, "q_h": queries.q_h, "q_o": queries.q_o,
        "w_k": weights.w_k, "w_v": weights.w_v, "w_z": weights.w_z,
        "w1": weights.w1, "b1": weights.b1, "w2": weights.w2, "b2": weights.b2,
    }


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward(patches: np.ndarray, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Forward pass keeping every intermediate needed by the backward pass."""
    m = params["q_v"].shape[0]
    q_all = np.concatenate([params["q_v"], params["q_h"], params["q_o"]], axis=0)
    d = q_all.shape[1]
    if patches.shape[1] != params["w_k"].shape[0]:
        raise ValueError(
            f"patch dim {patches.shape[1]} != projection input {params['w_k'].shape[0]}")
    keys = patches @ params["w_k"]
    values = patches @ params["w_v"]
    scores = q_all @ keys.T / math.sqrt(d)
    attn = _softmax_rows(scores)
    ctx = attn @ values
    out = q_all + ctx
    tokens = out[:m] @ params["w_z"]
    box_in = out[m:]
    hidden = np.tanh(box_in @ params["w1"] + params["b1"])
    raw = hidden @ params["w2"] + params["b2"]
    # clamp off exact 0/1 so saturated heads still emit non-degenerate boxes
    box_params = np.clip(_sigmoid(raw[:, :4]), 1e-6, 1.0 - 1e-6)
    obj = _sigmoid(raw[:, 4])
    return {
        "q_all": q_all, "keys": keys, "values": values, "attn": attn,
        "out": out, "tokens": tokens, "box_in": box_in, "hidden": hidden,
        "box_params": box_params, "obj": obj, "m": m, "d": d,
    }


def connector_forward(grid: PatchGrid, queries: QuerySet,
                      weights: ConnectorWeights) -> ConnectorOutput:
    """Compress ``grid`` into ``m`` tokens and predict 2 + k scored boxes."""
    grid.validate()
    queries.validate()
    params = params_from(queries, weights)
    fwd = _forward(grid.patches, params)
    boxes = [BBox.from_array(row) for row in fwd["box_params"]]
    return ConnectorOutput(tokens=fwd["tokens"], boxes=boxes,
                           scores=fwd["obj"], attn=fwd["attn"])


# ---------------------------------------------------------------------------
# generalized IoU
# ---------------------------------------------------------------------------

def _corners(params: np.ndarray) -> np.ndarray:
    cx, cy, w, h = params[..., 0], params[..., 1], params[..., 2], params[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def giou_batch(a_params: np.ndarray, b_params: np.ndarray) -> np.ndarray:
    """Generalized IoU for paired (n, 4) center-format box arrays."""
    a = _corners(np.asarray(a_params, dtype=np.float64))
    b = _corners(np.asarray(b_params, dtype=np.float64))
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a + area_b - inter
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    c_area = cw * ch
    return inter / union - (c_area - union) / c_area


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU of two boxes, in (-1, 1]."""
    a.validate()
    b.validate()
    return float(giou_batch(a.as_array()[None, :], b.as_array()[None, :])[0])


def giou_and_grad(pred_params: np.ndarray, gt_params: np.ndarray) -> Tuple[float, np.ndarray]:
    """GIoU value plus its gradient w.r.t. the predicted (cx, cy, w, h)."""
    a = _corners(pred_params)
    b = _corners(gt_params)
    aw, ah = a[2] - a[0], a[3] - a[1]
    area_a = aw * ah
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = ix2 - ix1, iy2 - iy1
    has_inter = iw > 0 and ih > 0
    inter = iw * ih if has_inter else 0.0
    union = area_a + area_b - inter
    cw = max(a[2], b[2]) - min(a[0], b[0])
    ch = max(a[3], b[3]) - min(a[1], b[1])
    c_area = cw * ch
    value = inter / union - (c_area - union) / c_area

    # corner gradients: d_inter, d_area_a, d_c_area w.r.t. (ax1, ay1, ax2, ay2)
    d_area = np.array([-ah, -aw, ah, aw])
    d_inter = np.zeros(4)
    if has_inter:
        d_inter[0] = -ih if a[0] >= b[0] else 0.0
        d_inter[1] = -iw if a[1] >= b[1] else 0.0
        d_inter[2] = ih if a[2] <= b[2] else 0.0
        d_inter[3] = iw if a[3] <= b[3] else 0.0
    d_c = np.zeros(4)
    if a[0] < b[0]:
        d_c[0] = -ch
    if a[1] < b[1]:
        d_c[1] = -cw
    if a[2] > b[2]:
        d_c[2] = ch
    if a[3] > b[3]:
        d_c[3] = cw
    d_union = d_area - d_inter
    d_iou = (d_inter * union - inter * d_union) / (union * union)
    d_ratio = (d_union * c_area - union * d_c) / (c_area * c_area)  # d(union / c_area)
    d_corner = d_iou + d_ratio
    # map corner grads back to center parametrization
    grad = np.array([
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        0.5 * (d_corner[2] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[1]),
    ])
    return float(value), grad


# ---------------------------------------------------------------------------
# matching and losses
# ---------------------------------------------------------------------------

def _pair_cost(gt: BBox, pred: BBox) -> float:
    l1 = float(np.abs(gt.as_array() - pred.as_array()).sum())
    return l1 + (1.0 - giou(gt, pred))


def _cost_matrix(gt: Sequence[BBox], pred: Sequence[BBox]) -> np.ndarray:
    return np.array([[_pair_cost(g, p) for p in pred] for g in gt], dtype=np.float64)


def _optimal_cost(cost: np.ndarray) -> float:
    if cost.size == 0 or cost.shape[0] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian_match(pred: Sequence[BBox], gt: Sequence[BBox]) -> List[int]:
    """Injective gt -> pred assignment minimizing L1 + (1 - GIoU) pair costs.

    Among cost-minimizing assignments, returns the lexicographically smallest
    (sigma(0), sigma(1), ...).
    """
    n_gt, n_pred = len(gt), len(pred)
    if n_gt > n_pred:
        raise ValueError(f"more ground-truth boxes ({n_gt}) than predictions ({n_pred})")
    if n_gt == 0:
        return []
    cost = _cost_matrix(gt, pred)
    best = _optimal_cost(cost)
    assignment: List[int] = []
    used = np.zeros(n_pred, dtype=bool)
    acc = 0.0
    for i in range(n_gt):
        for j in range(n_pred):
            if used[j]:
                continue
            remaining = [c for c in range(n_pred) if not used[c] and c != j]
            tail = _optimal_cost(cost[np.ix_(range(i + 1, n_gt), remaining)]) \
                if i + 1 < n_gt else 0.0
            if acc + cost[i, j] + tail <= best + _MATCH_TIE_TOL:
                assignment.append(j)
                used[j] = True
                acc += cost[i, j]
                break
        else:
            raise RuntimeError("assignment search failed")  # unreachable
    return assignment


def loss_ho(pred: Sequence[BBox], gt: Sequence[BBox], assignment: Sequence[int],
            scores: Optional[np.ndarray] = None) -> float:
    """Matched pairs contribute (1 - GIoU) + L1; unmatched predictions
    contribute only the no-object score penalty -log(1 - score)."""
    if len(assignment) != len(gt):
        raise ValueError("assignment length must equal ground-truth count")
    if len(set(assignment)) != len(assignment):
        raise ValueError("assignment must be injective")
    if any(j < 0 or j >= len(pred) for j in assignment):
        raise ValueError("assignment index out of range")
    total = 0.0
    for g, j in zip(gt, assignment):
        total += (1.0 - giou(g, pred[j])) + float(np.abs(g.as_array() - pred[j].as_array()).sum())
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        for j in range(len(pred)):
            if j not in assignment:
                total += -math.log(max(1.0 - scores[j], 1e-12))
    return total


def loss_lm(logits: np.ndarray, targets: Sequence[int]) -> float:
    """Mean negative log-likelihood of the target ids under the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("empty target sequence")
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ValueError(f"logit/target length mismatch: {logits.shape} vs {targets.shape}")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValueError("target id out of vocab range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_z - shifted[np.arange(targets.size), targets]))


def loss_total(lm: float, ho: float, lambda_1: float) -> float:
    if lambda_1 < 0:
        raise ValueError(f"lambda_1 must be >= 0, got {lambda_1}")
    return lm + lambda_1 * ho


# ---------------------------------------------------------------------------
# frozen caption readout (toy stand-in for the language decoder)
# ---------------------------------------------------------------------------

BOS_ID = 0


@dataclass
class CaptionDecoder:
    """Frozen single-block cross-attention readout over the compressed tokens.

    Each caption position queries with the previous token's embedding and
    attends over the connector's output tokens; training never updates these
    arrays.
    """

    emb: np.ndarray   # (vocab, d)
    w_k2: np.ndarray  # (d, d)
    w_v2: np.ndarray  # (d, d)
    w_lm: np.ndarray  # (d, vocab)

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]


def init_caption_decoder(d: int, vocab_size: int, seed: int) -> CaptionDecoder:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD]))
    lim = 1.0 / math.sqrt(d)
    return CaptionDecoder(
        emb=rng.uniform(-1, 1, size=(vocab_size, d)),
        w_k2=rng.uniform(-lim, lim, size=(d, d)),
        w_v2=rng.uniform(-lim, lim, size=(d, d)),
        w_lm=rng.uniform(-lim, lim, size=(d, vocab_size)),
    )


def caption_logits(decoder: CaptionDecoder, tokens: np.ndarray,
                   targets: Sequence[int]) -> np.ndarray:
    """Teacher-forced logits for each caption position."""
    fwd = _caption_forward(decoder, tokens, np.asarray(targets, dtype=np.int64))
    return fwd["logits"]


def _caption_forward(decoder: CaptionDecoder, tokens: np.ndarray,
                     targets: np.ndarray) -> Dict[str, np.ndarray]:
    d = decoder.emb.shape[1]
    prev = np.concatenate([[BOS_ID], targets[:-1]])
    q2 = decoder.emb[prev]
    if tokens.shape[0] > 0:
        k2 = tokens @ decoder.w_k2
        v2 = tokens @ decoder.w_v2
        s2 = q2 @ k2.T / math.sqrt(d)
        a2 = _softmax_rows(s2)
        ctx = a2 @ v2
    else:
        k2 = v2 = a2 = None
        ctx = np.zeros_like(q2)
    out = q2 + ctx
    logits = out @ decoder.w_lm
    return {"q2": q2, "k2": k2, "v2": v2, "a2": a2, "out": out, "logits": logits}


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    grid: PatchGrid
    hands: List[BBox]
    objects: List[BBox]
    caption: List[int]


def synth_patches(seed: int, side: int, dim: int, hands: Sequence[BBox],
                  objects: Sequence[BBox], noise: float = 0.05) -> np.ndarray:
    """Background noise plus an additive blob per ground-truth box.

    Two fixed channels ramp with patch x/y so attended features carry
    location; each box adds a seeded direction vector weighted by a Gaussian
    bump at its center.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C]))
    jj, ii = np.meshgrid(np.arange(side), np.arange(side))
    px = (jj.ravel() + 0.5) / side
    py = (ii.ravel() + 0.5) / side
    feats = noise * rng.standard_normal((side * side, dim))
    ramp_x = rng.standard_normal(dim) / math.sqrt(dim)
    ramp_y = rng.standard_normal(dim) / math.sqrt(dim)
    feats += np.outer(px, ramp_x) + np.outer(py, ramp_y)
    for slot, box in enumerate(list(hands) + list(objects)):
        direction = rng.standard_normal(dim) / math.sqrt(dim)
        radius = max(0.25 * (box.w + box.h), 1.0 / side)
        bump = np.exp(-((px - box.cx) ** 2 + (py - box.cy) ** 2) / (2 * radius * radius))
        feats += 2.0 * np.outer(bump, direction)
    return feats


def _random_box(rng: np.random.Generator) -> BBox:
    return BBox(
        cx=float(rng.uniform(0.25, 0.75)),
        cy=float(rng.uniform(0.25, 0.75)),
        w=float(rng.uniform(0.15, 0.35)),
        h=float(rng.uniform(0.15, 0.35)),
    )


def _derive_caption(hands: Sequence[BBox], objects: Sequence[BBox],
                    vocab_size: int, length: int = 5) -> List[int]:
    digest = 17
    for box in list(hands) + list(objects):
        for v in box.as_array():
            digest = (digest * 31 + int(round(v * 1000))) % (1 << 30)
    return [1 + (digest + 7 * i) % (vocab_size - 1) for i in range(length)]


def make_scene(seed: int, side: int = 16, dim: int = 48, n_hands: int = 2,
               n_objects: int = 2, noise: float = 0.05,
               vocab_size: int = 64) -> Scene:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E]))
    hands = [_random_box(rng) for _ in range(n_hands)]
    objects = [_random_box(rng) for _ in range(n_objects)]
    patches = synth_patches(seed, side, dim, hands, objects, noise)
    caption = [1 + int(x) for x in rng.integers(0, vocab_size - 1, size=5)]
    return Scene(PatchGrid(patches, side).validate(), hands, objects, caption)


def save_scene(scene: Scene, path: str) -> None:
    doc = {
        "patches": base64.b64encode(
            np.ascontiguousarray(scene.grid.patches, dtype="<f8").tobytes()).decode("ascii"),
        "side": scene.grid.side,
        "dim": scene.grid.dim,
        "gt_boxes": (
            [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "kind": "hand"} for b in scene.hands]
            + [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "kind": "object"}
               for b in scene.objects]
        ),
        "caption": scene.caption,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_scene(path: str, vocab_size: int = 64) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    side = int(doc["side"])
    dim = int(doc["dim"])
    hands, objects = [], []
    for entry in doc["gt_boxes"]:
        box = BBox(float(entry["cx"]), float(entry["cy"]),
                   float(entry["w"]), float(entry["h"])).validate()
        kind = entry.get("kind", "object")
        (hands if kind == "hand" else objects).append(box)
    raw = doc["patches"]
    if isinstance(raw, str):
        buf = np.frombuffer(base64.b64decode(raw), dtype="<f8")
        patches = buf.reshape(side * side, dim).astype(np.float64)
    elif isinstance(raw, dict) and "seed" in raw:
        patches = synth_patches(int(raw["seed"]), side, dim, hands, objects,
                                noise=float(raw.get("noise", 0.05)))
    else:
        raise ValueError("scene 'patches' must be base64 data or {'seed': ...}")
    caption = [int(t) for t in doc.get("caption", [])]
    if not caption:
        caption = _derive_caption(hands, objects, vocab_size)
    return Scene(PatchGrid(patches, side).validate(), hands, objects, caption)


# ---------------------------------------------------------------------------
# joint loss with hand-written gradients
# ---------------------------------------------------------------------------

def stage1_losses(params: Dict[str, np.ndarray], decoder: CaptionDecoder,
                  scene: Scene, lambda_1: float) -> Dict[str, float]:
    value, _, _ = _stage1_forward(params, decoder, scene, lambda_1)
    return value


def _stage1_forward(params, decoder, scene, lambda_1):
    k = params["q_o"].shape[0]
    if len(scene.hands) > 2 or len(scene.objects) > k:
        raise ValueError("scene has more ground-truth boxes than queries")
    fwd = _forward(scene.grid.patches, params)
    if not np.all(np.isfinite(fwd["out"])):
        raise TrainingDivergence("non-finite connector activations")
    targets = np.asarray(scene.caption, dtype=np.int64)
    cap = _caption_forward(decoder, fwd["tokens"], targets)
    lm = loss_lm(cap["logits"], targets)

    boxes = [BBox.from_array(row) for row in fwd["box_params"]]
    sigma_h = hungarian_match(boxes[:2], scene.hands)
    sigma_o = hungarian_match(boxes[2:], scene.objects)
    ho = loss_ho(boxes[:2], scene.hands, sigma_h, scores=fwd["obj"][:2])
    ho += loss_ho(boxes[2:], scene.objects, sigma_o, scores=fwd["obj"][2:])
    total = loss_total(lm, ho, lambda_1)
    losses = {"total": total, "lm": lm, "ho": ho}
    return losses, fwd, {"cap": cap, "targets": targets,
                         "sigma_h": sigma_h, "sigma_o": sigma_o, "boxes": boxes}


def stage1_value_and_grads(params: Dict[str, np.ndarray], decoder: CaptionDecoder,
                           scene: Scene, lambda_1: float
                           ) -> Tuple[Dict[str, float], Dict[str, np.ndarray]]:
    """Joint loss and hand-derived gradients w.r.t. every connector parameter.

    The box assignment is recomputed here and treated as a constant of the
    differentiation, the usual set-prediction convention.
    """
    losses, fwd, aux = _stage1_forward(params, decoder, scene, lambda_1)
    m, d = fwd["m"], fwd["d"]
    cap, targets = aux["cap"], aux["targets"]
    n_t = targets.size
    patches = scene.grid.patches

    # language path: cross-entropy -> frozen readout -> compressed tokens
    probs = _softmax_rows(cap["logits"])
    dlogits = probs.copy()
    dlogits[np.arange(n_t), targets] -= 1.0
    dlogits /= n_t
    d_out_cap = dlogits @ decoder.w_lm.T
    if m > 0:
        d_ctx = d_out_cap
        d_a2 = d_ctx @ cap["v2"].T
        d_v2 = cap["a2"].T @ d_ctx
        d_s2 = cap["a2"] * (d_a2 - (d_a2 * cap["a2"]).sum(axis=1, keepdims=True))
        d_k2 = d_s2.T @ cap["q2"] / math.sqrt(d)
        d_tokens = d_k2 @ decoder.w_k2.T + d_v2 @ decoder.w_v2.T
    else:
        d_tokens = np.zeros((0, d))

    # box path: matched GIoU + L1, unmatched no-object penalty (scaled by lambda)
    n_boxes = fwd["box_params"].shape[0]
    d_box = np.zeros((n_boxes, 4))
    d_raw_score = np.zeros(n_boxes)
    for offset, gts, sigma in ((0, scene.hands, aux["sigma_h"]),
                               (2, scene.objects, aux["sigma_o"])):
        pool = range(offset, offset + (2 if offset == 0 else n_boxes - 2))
        matched = {offset + j for j in sigma}
        for gt_box, j_local in zip(gts, sigma):
            j = offset + j_local
            pred_params = fwd["box_params"][j]
            gt_params = gt_box.as_array()
            _, g_giou = giou_and_grad(pred_params, gt_params)
            d_box[j] += lambda_1 * (-g_giou + np.sign(pred_params - gt_params))
        for j in pool:
            if j not in matched:
                # d/d raw of -log(1 - sigmoid(raw)) is sigmoid(raw)
                d_raw_score[j] += lambda_1 * fwd["obj"][j]

    d_raw = np.zeros((n_boxes, 5))
    d_raw[:, :4] = d_box * fwd["box_params"] * (1.0 - fwd["box_params"])
    d_raw[:, 4] = d_raw_score
    d_hidden = d_raw @ params["w2"].T
    d_w2 = fwd["hidden"].T @ d_raw
    d_b2 = d_raw.sum(axis=0)
    d_pre = d_hidden * (1.0 - fwd["hidden"] ** 2)
    d_w1 = fwd["box_in"].T @ d_pre
    d_b1 = d_pre.sum(axis=0)
    d_box_in = d_pre @ params["w1"].T

    # merge both paths into the cross-attention block
    d_out = np.zeros_like(fwd["out"])
    if m > 0:
        d_w_z = fwd["out"][:m].T @ d_tokens
        d_out[:m] = d_tokens @ params["w_z"].T
    else:
        d_w_z = np.zeros_like(params["w_z"])
    d_out[m:] += d_box_in

    d_q_all = d_out.copy()
    d_attn = d_out @ fwd["values"].T
    d_values = fwd["attn"].T @ d_out
    d_scores = fwd["attn"] * (d_attn - (d_attn * fwd["attn"]).sum(axis=1, keepdims=True))
    d_q_all += d_scores @ fwd["keys"] / math.sqrt(d)
    d_keys = d_scores.T @ fwd["q_all"] / math.sqrt(d)
    grads = {
        "q_v": d_q_all[:m],
        "q_h": d_q_all[m:m + 2],
        "q_o": d_q_all[m + 2:],
        "w_k": patches.T @ d_keys,
        "w_v": patches.T @ d_values,
        "w_z": d_w_z,
        "w1": d_w1,
        "b1": d_b1,
        "w2": d_w2,
        "b2": d_b2,
    }
    return losses, grads


# ---------------------------------------------------------------------------
# gradient checking and the toy trainer
# ---------------------------------------------------------------------------

def grad_check(params: Dict[str, np.ndarray],
               value_and_grad_fn: Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]],
               eps: float, max_coords: int = 400,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator. All
    coordinates are checked when the parameter count allows, otherwise a
    seeded sample of ``max_coords``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    value, grads = value_and_grad_fn(params)
    if not np.isfinite(value):
        raise ValueError("loss is not finite at the evaluation point")
    coords = [(name, idx) for name in sorted(params)
              for idx in np.ndindex(params[name].shape)]
    if len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picks]
    worst = 0.0
    for name, idx in coords:
        original = params[name][idx]
        params[name][idx] = original + eps
        up = value_and_grad_fn(params)[0]
        params[name][idx] = original - eps
        down = value_and_grad_fn(params)[0]
        params[name][idx] = original
        numeric = (up - down) / (2 * eps)
        analytic = grads[name][idx]
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, rel)
    return worst


@dataclass
class TrainResult:
    """Per-epoch (total, lm, ho) losses; row 0 is the pre-training value."""

    curve: np.ndarray  # (epochs + 1, 3)

    @property
    def initial_ho(self) -> float:
        return float(self.curve[0, 2])

    @property
    def final_ho(self) -> float:
        return float(self.curve[-1, 2])


def train_toy(params: Dict[str, np.ndarray], decoder: CaptionDecoder,
              scenes: Sequence[Scene], epochs: int, lr: float,
              lambda_1: float = 2.0, schedule: str = "cosine") -> TrainResult:
    """Plain gradient descent on the connector parameters only.

    ``schedule`` is "cosine" (step size annealed to zero, which settles the
    constant-magnitude L1 gradients near the optimum) or "constant". The
    caption decoder stays frozen. Raises ``TrainingDivergence`` when the loss
    goes non-finite.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    if schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown schedule {schedule!r}")
    rows = []
    for epoch in range(epochs):
        sums = np.zeros(3)
        grad_acc = {name: np.zeros_like(arr) for name, arr in params.items()}
        for scene in scenes:
            losses, grads = stage1_value_and_grads(params, decoder, scene, lambda_1)
            if not np.isfinite(losses["total"]):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}: {losses}")
            sums += (losses["total"], losses["lm"], losses["ho"])
            for name in grad_acc:
                grad_acc[name] += grads[name]
        rows.append(sums / len(scenes))
        step = lr
        if schedule == "cosine":
            step = lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
        for name in params:
            params[name] = params[name] - (step / len(scenes)) * grad_acc[name]
    final = np.zeros(3)
    for scene in scenes:
        losses = stage1_losses(params, decoder, scene, lambda_1)
        final += (losses["total"], losses["lm"], losses["ho"])
    rows.append(final / len(scenes))
    return TrainResult(curve=np.array(rows))
