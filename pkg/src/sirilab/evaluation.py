"""Prec@0.5 evaluation and encoder cross-modal attention maps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import GroundingDataset, GroundingSample
from .model import GroundingModel, batch_tensors, predict_box, trim_padding
from .objectives import box_iou

IOU_THRESHOLD = 0.5
ATTENTION_AGGREGATION = "last-layer/head-mean/visual-query-text-key-mean/minmax"


@dataclass(frozen=True)
class EvalResult:
    prec_at_05: float
    mean_iou: float
    n_samples: int
    ious: tuple[float, ...] = ()

    def to_json(self) -> dict:
        return {"prec_at_05": self.prec_at_05, "mean_iou": self.mean_iou, "n_samples": self.n_samples}


def summarize_ious(ious: Sequence[float]) -> EvalResult:
    """Positive iff IoU is strictly greater than the threshold."""
    ious = tuple(float(v) for v in ious)
    if not ious:
        raise ValueError("cannot evaluate an empty dataset")
    hits = sum(1 for v in ious if v > IOU_THRESHOLD)
    return EvalResult(hits / len(ious), math.fsum(ious) / len(ious), len(ious), ious)


def predicted_boxes(model: GroundingModel, dataset: GroundingDataset, batch_size: int = 128,
                    decoder: str = "main") -> np.ndarray:
    """Corner-form predicted box per sample, in dataset order.

    Batches are formed over the seed-sorted order so the result does not
    depend on how the dataset happens to be ordered.
    """
    imgs, toks, _ = dataset.arrays()
    order = np.argsort(np.asarray(dataset.seeds), kind="stable")
    out = np.empty((len(dataset), 4), dtype=np.float32)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for i in range(0, len(order), batch_size):
                idx = order[i:i + batch_size]
                x, t = batch_tensors(imgs[idx], toks[idx])
                pred = model(x, t, decoders=(decoder,))[decoder]
                out[idx] = predict_box(pred).numpy()
    finally:
        model.train(was_training)
    return out


def evaluate(model: GroundingModel, dataset: GroundingDataset, batch_size: int = 128,
             decoder: str = "main") -> EvalResult:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    boxes = predicted_boxes(model, dataset, batch_size, decoder)
    gt = dataset.arrays()[2]
    ious = box_iou(torch.from_numpy(boxes).double(), torch.from_numpy(gt).double()).numpy()
    return summarize_ious(ious)


@dataclass(frozen=True)
class AttentionMap:
    grid: np.ndarray
    layer: int
    aggregation: str = ATTENTION_AGGREGATION


def minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def cross_modal_map(attn: torch.Tensor, n_visual: int, text_valid: torch.Tensor, grid: int) -> np.ndarray:
    """Raw per-visual-token mass on the text keys.

    ``attn`` is one sample's ``(heads, T, T)`` attention; ``text_valid`` marks
    the non-pad text tokens.
    """
    a = attn.mean(0)[:n_visual, n_visual:][:, text_valid]
    return a.mean(-1).reshape(grid, grid).double().numpy()


def extract_attention(model: GroundingModel, sample: GroundingSample) -> AttentionMap:
    imgs, toks = batch_tensors(sample.image.transpose(2, 0, 1)[None].astype(np.float32),
                               sample.padded_expression()[None])
    toks = trim_padding(toks)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            enc = model.encode(imgs, toks, keep_attention=True)
    finally:
        model.train(was_training)
    last = len(enc.attentions) - 1
    raw = cross_modal_map(enc.attentions[last][0], enc.n_visual, toks[0] != 0, model.config.grid)
    return AttentionMap(minmax(raw), last)
