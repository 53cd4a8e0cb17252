"""Box geometry, bipartite matching and the grounding loss stack.

Boxes are normalized. Predictions come in center-size form ``(cx, cy, w, h)``;
ground truth and all IoU-style geometry use corner form ``(x1, y1, x2, y2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    ce: float = 1.0
    eos: float = 0.1


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = b.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def _safe_div(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    # 0 wherever the denominator vanishes, without NaN gradients leaking through
    ok = den > 0
    return torch.where(ok, num / torch.where(ok, den, torch.ones_like(den)), torch.zeros_like(num))


def _iou_union(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    return _safe_div(inter, union), union


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of broadcastable corner-form boxes; 0 for an empty union."""
    return _iou_union(a, b)[0]


def generalized_box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU in [-1, 1]; 0 when the enclosing box has no area."""
    iou, union = _iou_union(a, b)
    lt = torch.minimum(a[..., :2], b[..., :2])
    rb = torch.maximum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    return iou - _safe_div(hull - union, hull)


def _as_box(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


def iou(a, b) -> float:
    return float(box_iou(_as_box(a), _as_box(b)))


def giou(a, b) -> float:
    return float(generalized_box_iou(_as_box(a), _as_box(b)))


def giou_loss(a, b) -> float:
    return 1.0 - giou(a, b)


def soft_token_ce(logits: torch.Tensor, matched: torch.Tensor | int, eos_coef: float = 0.1) -> torch.Tensor:
    """Soft-token cross-entropy averaged over queries.

    ``logits`` is ``(Q, 2)`` or ``(B, Q, 2)``; ``matched`` the matched query
    index (per sample). The matched query is labelled class 0 ("belongs"),
    every other query class 1 ("no object") with weight ``eos_coef``.
    Returns a scalar for a single sample, ``(B,)`` for a batch.
    """
    single = logits.dim() == 2
    if single:
        logits = logits.unsqueeze(0)
    b, q, _ = logits.shape
    matched = torch.as_tensor(matched, dtype=torch.long).reshape(-1).expand(b)
    labels = torch.ones(b, q, dtype=torch.long)
    labels[torch.arange(b), matched] = 0
    weight = torch.tensor([1.0, eos_coef], dtype=logits.dtype)
    ce = F.cross_entropy(logits.reshape(b * q, 2), labels.reshape(-1), weight=weight, reduction="none")
    out = ce.reshape(b, q).sum(dim=1) / q
    return out[0] if single else out


@dataclass(frozen=True)
class MatchResult:
    """Assignment target index -> query index, with the cost of each chosen pair."""

    target_idx: tuple[int, ...]
    query_idx: tuple[int, ...]
    costs: tuple[float, ...]

    def query_for(self, target: int = 0) -> int:
        return self.query_idx[self.target_idx.index(target)]


def matching_cost(pred_boxes: torch.Tensor, pred_logits: torch.Tensor, targets: torch.Tensor,
                  weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Cost matrix between center-size predictions and corner-form targets.

    ``(Q, 4), (Q, 2), (T, 4) -> (Q, T)``; a leading batch dimension on all
    three inputs gives ``(B, Q, T)``.
    """
    with torch.no_grad():
        boxes = pred_boxes.double()
        tgts = targets.double()
        prob = pred_logits.double().softmax(-1)[..., 0]
        l1 = (boxes[..., :, None, :] - box_xyxy_to_cxcywh(tgts)[..., None, :, :]).abs().sum(-1)
        g = generalized_box_iou(box_cxcywh_to_xyxy(boxes)[..., :, None, :], tgts[..., None, :, :])
        return weights.l1 * l1 + weights.giou * (1.0 - g) - weights.ce * prob[..., None]


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost assignment of targets (columns) to queries (rows).

    Among equal-cost optima a target prefers the lowest free query index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("matching cost contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    taken = set(rows.tolist())
    for k in range(len(cols)):
        r, c = rows[k], cols[k]
        for cand in range(r):
            if cand not in taken and cost[cand, c] == cost[r, c]:
                taken.discard(r)
                taken.add(cand)
                rows[k] = cand
                break
    order = np.argsort(cols)
    return cols[order], rows[order]


def match(pred_boxes: torch.Tensor, pred_logits: torch.Tensor, target: torch.Tensor,
          weights: LossWeights = LossWeights()) -> MatchResult:
    """Match one sample's queries against its target box(es)."""
    targets = target.reshape(-1, 4)
    cost = matching_cost(pred_boxes, pred_logits, targets, weights).cpu().numpy()
    t_idx, q_idx = hungarian(cost)
    return MatchResult(tuple(int(t) for t in t_idx), tuple(int(q) for q in q_idx),
                       tuple(float(cost[q, t]) for t, q in zip(t_idx, q_idx)))


def match_batch(pred_boxes: torch.Tensor, pred_logits: torch.Tensor, targets: torch.Tensor,
                weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Matched query index per sample for ``(B, Q, 4)`` predictions and ``(B, 4)`` targets."""
    cost = matching_cost(pred_boxes, pred_logits, targets[:, None, :], weights).numpy()
    return torch.tensor([int(hungarian(c)[1][0]) for c in cost], dtype=torch.long)


@dataclass
class LossBreakdown:
    l1: torch.Tensor
    giou: torch.Tensor
    soft_token: torch.Tensor
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    def as_dict(self) -> dict[str, float]:
        return {"l1": float(self.l1.detach()), "giou": float(self.giou.detach()),
                "soft_token": float(self.soft_token.detach()), "total": float(self.total.detach())}


def total_loss(pred_boxes: torch.Tensor, pred_logits: torch.Tensor, targets: torch.Tensor,
               weights: LossWeights = LossWeights(), matched: torch.Tensor | None = None) -> LossBreakdown:
    """Batch-mean grounding loss.

    Shapes: boxes ``(B, Q, 4)`` center-size, logits ``(B, Q, 2)``, targets
    ``(B, 4)`` corner form. Unbatched inputs are accepted too. L1 is taken in
    center-size space and GIoU in corner space, both on the matched query only.
    """
    if pred_boxes.dim() == 2:
        pred_boxes, pred_logits, targets = pred_boxes[None], pred_logits[None], targets.reshape(1, 4)
    if matched is None:
        matched = match_batch(pred_boxes, pred_logits, targets, weights)
    rows = torch.arange(pred_boxes.shape[0])
    box = pred_boxes[rows, matched]
    l1 = (box - box_xyxy_to_cxcywh(targets)).abs().sum(-1).mean()
    g = (1.0 - generalized_box_iou(box_cxcywh_to_xyxy(box), targets)).mean()
    ce = soft_token_ce(pred_logits, matched, weights.eos).mean()
    total = weights.l1 * l1 + weights.giou * g + weights.ce * ce
    return LossBreakdown(l1, g, ce, total, weights)


def dual_loss(main: tuple[torch.Tensor, torch.Tensor], aux: tuple[torch.Tensor, torch.Tensor],
              targets: torch.Tensor, weights: LossWeights = LossWeights()) -> tuple[torch.Tensor, LossBreakdown, LossBreakdown]:
    """Sum of the two decoders' losses, each matched on its own predictions."""
    lm = total_loss(main[0], main[1], targets, weights)
    la = total_loss(aux[0], aux[1], targets, weights)
    return lm.total + la.total, lm, la
