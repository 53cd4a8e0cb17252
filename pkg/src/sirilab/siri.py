"""Selective retraining: snapshotting, re-initialization plans and the period loop.

A run trains the model once (period 0), then repeatedly re-initializes every
role that the retrain mode does not keep and trains again with a fresh
optimizer at the same constant learning rate. Visual and language roles are
restored from the snapshot taken before the first step; encoder and decoder
roles get a new Xavier draw salted with the round index.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np
import torch

from .data import GroundingDataset, build_corpus, load_dataset
from .evaluation import EvalResult, evaluate
from .history import write_history
from .model import (ROLES, GroundingModel, ModelConfig, batch_tensors, export_single_decoder, init_model,
                    init_role_, role_of, role_seed, save_checkpoint, trim_padding)
from .objectives import LossWeights, dual_loss, total_loss

log = logging.getLogger(__name__)

MODE_TABLE = {
    "a": ("V", "L", "E", "D"),
    "b": ("V", "L", "E"),
    "c": ("V", "D"),
    "d": ("V", "E"),
    "e": ("L", "E"),
    "f": ("E", "D"),
    "g": ("D",),
    "h": ("E",),
}


class SiriError(RuntimeError):
    pass


class TrainingDiverged(SiriError):
    pass


@dataclass(frozen=True)
class RetrainMode:
    label: str
    kept_roles: frozenset[str]

    @classmethod
    def get(cls, label: "str | RetrainMode") -> "RetrainMode":
        if isinstance(label, RetrainMode):
            return label
        if label not in MODE_TABLE:
            raise SiriError(f"unknown retrain mode {label!r}; expected one of {sorted(MODE_TABLE)}")
        return cls(label, frozenset(MODE_TABLE[label]))

    def keeps(self, role: str) -> bool:
        return role in self.kept_roles


ALL_MODES = tuple(RetrainMode.get(k) for k in MODE_TABLE)


@dataclass(frozen=True)
class PeriodSchedule:
    initial_epochs: int = 60
    retrain_epochs: int = 30
    n_periods: int = 5
    learning_rate: float = 3e-4
    batch_size: int = 32
    base_seed: int = 0
    weight_decay: float = 1e-4
    max_grad_norm: float = 0.1
    role_lr: Mapping[str, float] | None = None
    warmup_steps: int = 0

    def __post_init__(self):
        if self.initial_epochs < 0 or self.retrain_epochs < 0 or self.n_periods < 0:
            raise SiriError("epoch and period counts must be non-negative")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise SiriError("learning rate and batch size must be positive")

    def lr_for(self, role: str) -> float:
        return (self.role_lr or {}).get(role, self.learning_rate)


class InitSnapshot:
    """Read-only copies of the pre-training parameters of the restored roles.

    V and L are always stored; D is stored too when the decoder policy is
    ``snapshot``. E and (by default) D are instead re-drawn from seeds.
    """

    def __init__(self, states: dict[str, np.ndarray], base_seed: int, decoder_policy: str):
        for a in states.values():
            a.flags.writeable = False
        self.states: Mapping[str, np.ndarray] = MappingProxyType(states)
        self.base_seed = base_seed
        self.decoder_policy = decoder_policy

    @property
    def roles(self) -> frozenset[str]:
        return frozenset(role_of(n) for n in self.states)

    def tensor(self, name: str) -> torch.Tensor:
        return torch.from_numpy(self.states[name].copy())

    def lineage(self) -> dict:
        return {"base_seed": self.base_seed, "decoder_policy": self.decoder_policy,
                "stored_roles": sorted(self.roles)}


def snapshot_init(model: GroundingModel, base_seed: int, decoder_policy: str = "fresh") -> InitSnapshot:
    if model.steps_taken:
        raise SiriError(f"snapshot requested after {model.steps_taken} optimizer steps; take it before training")
    if decoder_policy not in ("fresh", "snapshot"):
        raise SiriError(f"decoder re-init policy must be 'fresh' or 'snapshot', got {decoder_policy!r}")
    roles = {"V", "L"} | ({"D"} if decoder_policy == "snapshot" else set())
    states = {n: p.detach().cpu().numpy().copy() for n, p in model.named_parameters() if role_of(n) in roles}
    return InitSnapshot(states, base_seed, decoder_policy)


def plan_sources(mode: RetrainMode | str, snap: InitSnapshot) -> dict[str, str]:
    """Where each role's parameters come from after the plan: trained, snapshot or fresh."""
    mode = RetrainMode.get(mode)
    out = {}
    for role in ROLES:
        if mode.keeps(role):
            out[role] = "trained"
        elif role in snap.roles:
            out[role] = "snapshot"
        else:
            out[role] = "fresh"
    return out


def apply_retrain_plan(trained: GroundingModel, snap: InitSnapshot, mode: RetrainMode | str,
                       round_index: int) -> GroundingModel:
    """New model whose kept roles are copied from ``trained`` and the rest re-initialized.

    Constant queries are buffers and pass through untouched.
    """
    if round_index < 1:
        raise SiriError("retraining rounds are numbered from 1")
    missing = set(snap.states) - set(dict(trained.named_parameters()))
    if missing:
        raise SiriError(f"snapshot does not match the model configuration: {sorted(missing)[:3]}")
    for name, p in trained.named_parameters():
        if name in snap.states and tuple(p.shape) != snap.states[name].shape:
            raise SiriError(f"shape mismatch for {name}: {tuple(p.shape)} vs {snap.states[name].shape}")
    out = copy.deepcopy(trained)
    params = out.param_tree()
    with torch.no_grad():
        for role, source in plan_sources(mode, snap).items():
            if source == "snapshot":
                for name, p in params.items():
                    if role_of(name) == role:
                        p.copy_(snap.tensor(name))
            elif source == "fresh":
                init_role_(out, role, role_seed(snap.base_seed, role, round_index))
    return out


# --- training ---------------------------------------------------------------

def _period_seed(base_seed: int, tag: int, round_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, 1000 + tag, round_index]).generate_state(1)[0])


def make_optimizer(model: GroundingModel, schedule: PeriodSchedule) -> torch.optim.AdamW:
    groups: dict[float, list] = {}
    for name, p in model.named_parameters():
        groups.setdefault(schedule.lr_for(role_of(name)), []).append(p)
    return torch.optim.AdamW([{"params": ps, "lr": lr} for lr, ps in groups.items()],
                             weight_decay=schedule.weight_decay)


def train_period(model: GroundingModel, data: GroundingDataset, schedule: PeriodSchedule, epochs: int,
                 round_index: int = 0, weights: LossWeights = LossWeights(),
                 on_epoch_end: Callable[[int, GroundingModel, dict], None] | None = None
                 ) -> tuple[GroundingModel, list[dict]]:
    """Train in place for ``epochs`` with a fresh AdamW; returns the model and per-epoch mean losses.

    Shuffling and dropout are seeded from ``(base_seed, round_index)``.
    """
    curve: list[dict] = []
    if epochs == 0:
        return model, curve
    torch.manual_seed(_period_seed(schedule.base_seed, 1, round_index))
    shuffle = torch.Generator().manual_seed(_period_seed(schedule.base_seed, 2, round_index))
    opt = make_optimizer(model, schedule)
    base_lrs = [g["lr"] for g in opt.param_groups]
    imgs, toks, boxes = batch_tensors(*data.arrays())
    decoders = tuple(model.config.decoders)
    n = len(data)
    step = 0
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(n, generator=shuffle)
        sums = {"l1": 0.0, "giou": 0.0, "soft_token": 0.0, "total": 0.0}
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            preds = model(imgs[idx], toks[idx], decoders=decoders)
            target = boxes[idx]
            if not all(torch.isfinite(t).all() for pr in preds.values() for t in pr):
                raise TrainingDiverged(
                    f"non-finite predictions at round {round_index}, epoch {epoch}, step {step}; "
                    f"batch indices {idx.tolist()}")
            if len(decoders) == 2:
                loss, lm, la = dual_loss(preds["main"], preds["aux"], target, weights)
                parts = {k: lm.as_dict()[k] + la.as_dict()[k] for k in sums}
            else:
                lm = total_loss(*preds["main"], target, weights)
                loss, parts = lm.total, lm.as_dict()
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at round {round_index}, epoch {epoch}, step {step}: {parts}; "
                    f"batch indices {idx.tolist()}")
            if schedule.warmup_steps and step < schedule.warmup_steps:
                for g, lr in zip(opt.param_groups, base_lrs):
                    g["lr"] = lr * (step + 1) / schedule.warmup_steps
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if schedule.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.max_grad_norm)
            opt.step()
            model.steps_taken += 1
            step += 1
            for k in sums:
                sums[k] += parts[k] * len(idx)
        curve.append({k: v / n for k, v in sums.items()})
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, curve[-1])
            model.train()
    return model, curve


# --- orchestration -------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 0
    fraction: float = 1.0
    relation_ratio: float = 0.5
    train_path: str | None = None
    val_path: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: PeriodSchedule = field(default_factory=PeriodSchedule)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    mode: str = "h"
    multitask: bool = False
    reinit_decoder: str = "fresh"
    stop_epsilon: float | None = None
    run_id: str = "run"

    def to_json(self) -> dict:
        d = asdict(self)
        if d["schedule"]["role_lr"] is not None:
            d["schedule"]["role_lr"] = dict(d["schedule"]["role_lr"])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        d = dict(d)
        return cls(model=ModelConfig(**d.pop("model", {})), schedule=PeriodSchedule(**d.pop("schedule", {})),
                   loss=LossWeights(**d.pop("loss", {})), data=DataConfig(**d.pop("data", {})), **d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def load_splits(cfg: DataConfig, image_size: int = 64) -> tuple[GroundingDataset, GroundingDataset]:
    if cfg.train_path:
        train = load_dataset(cfg.train_path)
        val = load_dataset(cfg.val_path) if cfg.val_path else None
    else:
        splits = build_corpus(cfg.seed, cfg.n_train, cfg.n_val, 0, image_size, cfg.relation_ratio)
        train, val = splits["train"], splits.get("val")
    if val is None:
        raise SiriError("a validation split is required")
    if cfg.fraction < 1.0:
        train = train.fraction(cfg.fraction)
    return train, val


@dataclass
class PeriodRecord:
    period: int
    mode: str
    epochs: int
    train_loss: list[float]
    loss_components: list[dict]
    val: EvalResult
    checkpoint: str | None
    seeds: dict

    def to_json(self) -> dict:
        return {"period": self.period, "mode": self.mode, "epochs": self.epochs,
                "train_loss": self.train_loss, "loss_components": self.loss_components,
                "val_prec_at_05": self.val.prec_at_05, "val_mean_iou": self.val.mean_iou,
                "val_n": self.val.n_samples, "checkpoint": self.checkpoint, "seeds": self.seeds}


@dataclass
class RunHistory:
    config: RunConfig
    records: list[PeriodRecord] = field(default_factory=list)
    model: GroundingModel | None = None
    exported: GroundingModel | None = None
    snapshot: InitSnapshot | None = None
    encoder_states: list[tuple[dict, dict]] = field(default_factory=list)
    decoder_states: list[tuple[dict, dict]] = field(default_factory=list)

    @property
    def final_prec(self) -> float:
        return self.records[-1].val.prec_at_05

    @property
    def precs(self) -> list[float]:
        return [r.val.prec_at_05 for r in self.records]


def _role_state(model: GroundingModel, role: str) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters() if role_of(n) == role}


def run_siri(config: RunConfig, data: tuple[GroundingDataset, GroundingDataset] | None = None,
             out_dir: str | Path | None = None, track_states: bool = False,
             initial_model: GroundingModel | None = None, snapshot: InitSnapshot | None = None,
             on_epoch_end: Callable[[int, int, GroundingModel, dict], None] | None = None) -> RunHistory:
    """Initial training followed by ``n_periods`` selective-retraining periods.

    With ``out_dir`` set, each period's checkpoint goes to ``period_<t>/`` and
    its record is appended to ``history.jsonl``. ``track_states`` keeps the
    encoder/decoder parameters at every period start and end in memory.
    ``initial_model``/``snapshot`` let several runs share one trained period 0.
    ``on_epoch_end(period, epoch, model, losses)`` is called after every epoch.
    """
    sched = config.schedule
    mode = RetrainMode.get(config.mode)
    train, val = data if data is not None else load_splits(config.data, config.model.image_size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))
        hist_path = out / "history.jsonl"
        if hist_path.exists():
            hist_path.unlink()

    history = RunHistory(config)
    if initial_model is None:
        model = init_model(config.model, sched.base_seed)
        history.snapshot = snapshot_init(model, sched.base_seed, config.reinit_decoder)
        start_period = 0
    else:
        if snapshot is None:
            raise SiriError("a shared initial model needs its snapshot")
        model = copy.deepcopy(initial_model)
        history.snapshot = snapshot
        start_period = 1

    def hook(t: int):
        if on_epoch_end is None:
            return None
        return lambda epoch, m, losses: on_epoch_end(t, epoch, m, losses)

    def record(t: int, epochs: int, curve: list[dict], reinit: dict):
        res = evaluate(model, val)
        ckpt = None
        if out is not None:
            ckpt = f"period_{t}"
            save_checkpoint(model, out / ckpt, {"round": t, "mode": mode.label, "base_seed": sched.base_seed})
        rec = PeriodRecord(t, mode.label if t else "initial", epochs, [c["total"] for c in curve], curve, res, ckpt,
                           {"base_seed": sched.base_seed, "data_seed": config.data.seed, **reinit})
        history.records.append(rec)
        if out is not None:
            write_history({**rec.to_json(), "time": time.time()}, out / "history.jsonl")
        log.info("period %d (%s): val Prec@0.5 %.4f", t, rec.mode, res.prec_at_05)

    if start_period == 0:
        start = (_role_state(model, "E"), _role_state(model, "D")) if track_states else None
        model, curve = train_period(model, train, sched, sched.initial_epochs, 0, config.loss, hook(0))
        if track_states:
            history.encoder_states.append((start[0], _role_state(model, "E")))
            history.decoder_states.append((start[1], _role_state(model, "D")))
        record(0, sched.initial_epochs, curve, {})

    plateau = 0
    for t in range(1, sched.n_periods + 1):
        model = apply_retrain_plan(model, history.snapshot, mode, t)
        sources = plan_sources(mode, history.snapshot)
        reinit = {"sources": sources,
                  "fresh_seeds": {r: role_seed(sched.base_seed, r, t) for r, s in sources.items() if s == "fresh"}}
        start = (_role_state(model, "E"), _role_state(model, "D")) if track_states else None
        model, curve = train_period(model, train, sched, sched.retrain_epochs, t, config.loss, hook(t))
        if track_states:
            history.encoder_states.append((start[0], _role_state(model, "E")))
            history.decoder_states.append((start[1], _role_state(model, "D")))
        record(t, sched.retrain_epochs, curve, reinit)
        if config.stop_epsilon is not None and len(history.records) >= 2:
            gain = history.records[-1].val.prec_at_05 - history.records[-2].val.prec_at_05
            plateau = plateau + 1 if gain < config.stop_epsilon else 0
            if plateau >= 2:
                log.info("validation plateau after period %d; stopping", t)
                break

    history.model = model
    if model.config.aux_queries is not None:
        history.exported = export_single_decoder(model, "main")
        if out is not None:
            save_checkpoint(history.exported, out / "export", {"round": history.records[-1].period,
                                                               "mode": mode.label, "exported_from": "main"})
    else:
        history.exported = model
    return history


def run_multitask_siri(config: RunConfig, queries: str = "LC", **kw) -> RunHistory:
    """SiRi with a second, independent decoder; ``queries`` names main+aux query kinds (LL, CC or LC)."""
    if len(queries) != 2 or any(q not in "LC" for q in queries):
        raise SiriError(f"query pair must be two of L/C, got {queries!r}")
    mcfg = replace(config.model, main_queries=queries[0], aux_queries=queries[1])
    return run_siri(replace(config, model=mcfg, multitask=True), **kw)


def continued_training_config(config: RunConfig, periods: int | None = None) -> RunConfig:
    """Plain training for as many epochs as SiRi's initial + retrain periods."""
    s = config.schedule
    k = s.n_periods if periods is None else periods
    return replace(config, schedule=replace(s, initial_epochs=s.initial_epochs + k * s.retrain_epochs, n_periods=0))


def run_siri_vs_baseline(config: RunConfig, data: tuple[GroundingDataset, GroundingDataset] | None = None,
                         out_dir: str | Path | None = None) -> tuple[RunHistory, RunHistory]:
    """Continued-training baseline and a SiRi run with the same total epochs.

    SiRi's initial period is the baseline's first ``initial_epochs`` epochs
    (same seeds, same fresh optimizer), so the baseline is trained once and
    SiRi branches off a copy taken at that epoch.
    """
    data = data if data is not None else load_splits(config.data, config.model.image_size)
    out = Path(out_dir) if out_dir is not None else None
    n0 = config.schedule.initial_epochs
    if n0 < 1:
        raise SiriError("branching needs at least one initial epoch")
    branch = {}

    def capture(period: int, epoch: int, model: GroundingModel, _losses: dict) -> None:
        if epoch == n0 - 1:
            branch["model"] = copy.deepcopy(model)

    base = run_siri(continued_training_config(config), data, out / "baseline" if out else None,
                    on_epoch_end=capture)
    siri = run_siri(config, data, out / "siri" if out else None,
                    initial_model=branch["model"], snapshot=base.snapshot)
    return base, siri


def run_mode_ablation(config: RunConfig, data: tuple[GroundingDataset, GroundingDataset] | None = None,
                      out_dir: str | Path | None = None, modes=ALL_MODES) -> list[dict]:
    """One retraining period per mode, all starting from the same initial-trained model."""
    data = data if data is not None else load_splits(config.data, config.model.image_size)
    out = Path(out_dir) if out_dir is not None else None
    base = replace(config, schedule=replace(config.schedule, n_periods=0))
    initial = run_siri(base, data, out / "initial" if out else None)
    rows = [{"mode": "initial", "kept": [], "val_prec_at_05": initial.final_prec, "history": initial}]
    for m in modes:
        cfg = replace(config, mode=m.label, schedule=replace(config.schedule, n_periods=1))
        h = run_siri(cfg, data, out / f"mode_{m.label}" if out else None,
                     initial_model=initial.model, snapshot=initial.snapshot)
        rows.append({"mode": m.label, "kept": sorted(m.kept_roles), "val_prec_at_05": h.final_prec, "history": h})
    if out is not None:
        table = [{k: v for k, v in r.items() if k != "history"} for r in rows]
        (out / "ablation.json").write_text(json.dumps(table, indent=2))
    return rows
