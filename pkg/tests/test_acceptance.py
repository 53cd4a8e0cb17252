"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion.

Criteria 5-7 train real models on the default 2000/500 corpus and take a
couple of hours on one CPU core; the trained runs are cached per session.
"""
import json
import math
import statistics
from dataclasses import replace

import numpy as np
import pytest
import torch

from sirilab.cli import main as cli_main
from sirilab.evaluation import summarize_ious
from sirilab.history import read_history, strip_volatile
from sirilab.model import ROLES, ModelConfig, init_model, role_of, xavier_bound
from sirilab.objectives import LossWeights, giou, match, matching_cost, total_loss
from sirilab.plots import emit_plots
from sirilab.queries import constant_queries, grid_points
from sirilab.siri import (MODE_TABLE, DataConfig, PeriodSchedule, RunConfig, apply_retrain_plan, load_splits,
                          run_multitask_siri, run_siri, run_siri_vs_baseline, snapshot_init, train_period)

ACCEPT_MODEL = ModelConfig(embed_dim=32, encoder_layers=2, decoder_layers=2, feedforward_dim=64, dropout=0.1)
ACCEPT_SCHEDULE = PeriodSchedule(initial_epochs=30, retrain_epochs=30, n_periods=3, learning_rate=2e-3,
                                 batch_size=32, max_grad_norm=0.0)
ACCEPT_LOSS = LossWeights(ce=5.0)
SEEDS = (0, 1, 2)
SMALL_FRACTION = 0.25

# tolerances
QUERY_ATOL = 1e-12
GIOU_ATOL = 1e-9
GRAD_RTOL = 1e-4
N_MATCH_INSTANCES = 200


def verdict(capsys, number: int, ok: bool, detail: str, soft: bool = False) -> None:
    tag = "PASS" if ok else ("SOFT-FAIL" if soft else "FAIL")
    with capsys.disabled():
        print(f"\n[acceptance] criterion {number}: {tag} | {detail}")


def accept_config(seed: int, fraction: float = 1.0, **kw) -> RunConfig:
    return RunConfig(model=ACCEPT_MODEL, schedule=replace(ACCEPT_SCHEDULE, base_seed=seed), loss=ACCEPT_LOSS,
                     data=DataConfig(fraction=fraction), mode="h", run_id=f"seed{seed}", **kw)


@pytest.fixture(scope="session")
def corpus():
    return load_splits(DataConfig())


@pytest.fixture(scope="session")
def artifacts(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def comparisons(corpus, artifacts):
    """fraction -> [(baseline, siri)] over SEEDS, computed on first use."""
    cache = {}

    def get(fraction: float):
        if fraction not in cache:
            data = (corpus[0].fraction(fraction), corpus[1]) if fraction < 1 else corpus
            cache[fraction] = [run_siri_vs_baseline(accept_config(s, fraction), data,
                                                    artifacts / f"frac{fraction:g}" / f"seed{s}")
                               for s in SEEDS]
        return cache[fraction]

    return get


# ---- 1 ----

def role_state(model, role):
    return {n: p.detach().clone() for n, p in model.named_parameters() if role_of(n) == role}


def test_criterion_1_reinit_exactness(capsys):
    data = load_splits(DataConfig(n_train=128, n_val=16))
    init = init_model(ACCEPT_MODEL, 11)
    snap = snapshot_init(init, 11)
    trained = train_period(init_model(ACCEPT_MODEL, 11), data[0], replace(ACCEPT_SCHEDULE, base_seed=11), 2)[0]
    problems = []
    for mode, kept in MODE_TABLE.items():
        out = apply_retrain_plan(trained, snap, mode, 1)
        for role in ROLES:
            new, old, first = role_state(out, role), role_state(trained, role), role_state(init, role)
            if role in kept:
                ok = all(torch.equal(new[n], old[n]) for n in new)
            elif role in ("V", "L"):
                ok = all(np.array_equal(new[n].numpy(), snap.states[n]) for n in new)
            else:
                within = all(float(p.abs().max()) <= xavier_bound(p) for p in new.values() if p.dim() >= 2)
                moved = max(float((new[n] - old[n]).abs().max()) for n in new) > 0
                fresh = max(float((new[n] - first[n]).abs().max()) for n in new) > 0
                ok = within and moved and fresh
            if not ok:
                problems.append(f"{mode}:{role}")
    verdict(capsys, 1, not problems, f"8 modes x 4 roles checked; violations: {problems or 'none'}")
    assert not problems


# ---- 2 ----

def test_criterion_2_encoder_continuity(capsys):
    data = load_splits(DataConfig(n_train=160, n_val=32))
    cfg = RunConfig(model=ACCEPT_MODEL, loss=ACCEPT_LOSS, mode="h",
                    schedule=replace(ACCEPT_SCHEDULE, initial_epochs=2, retrain_epochs=1, n_periods=3))
    hist = run_siri(cfg, data, track_states=True)
    chain = all(all(torch.equal(hist.encoder_states[t][0][k], hist.encoder_states[t - 1][1][k])
                    for k in hist.encoder_states[t][0]) for t in range(1, 4))
    finals = [hist.decoder_states[t][1] for t in range(4)]
    distinct = all(max(float((finals[i][k] - finals[j][k]).abs().max()) for k in finals[i]) > 0
                   for i in range(4) for j in range(i + 1, 4))
    starts_fresh = all(max(float((hist.decoder_states[t][0][k] - hist.decoder_states[t - 1][1][k]).abs().max())
                           for k in finals[0]) > 0 for t in range(1, 4))
    ok = chain and distinct and starts_fresh
    verdict(capsys, 2, ok, f"encoder chain bitwise={chain}, decoder states distinct={distinct and starts_fresh}")
    assert ok


# ---- 3 ----

def scripted_encoding(x: float, y: float, dim: int) -> list[float]:
    half = dim // 2
    row = []
    for coord in (x, y):
        for i in range(half // 2):
            w = coord / 10000.0 ** (2 * i / half)
            row += [math.sin(w), math.cos(w)]
    return row


def test_criterion_3_constant_queries(capsys):
    n, dim = 16, 64
    side = int(math.isqrt(n))
    pts = [(k1 / (side + 1), k2 / (side + 1)) for k1 in range(1, side + 1) for k2 in range(1, side + 1)]
    want_grid = np.array(pts)
    want_enc = np.array([scripted_encoding(x, y, dim) for x, y in pts])
    grid_err = float(np.abs(grid_points(n) - want_grid).max())
    enc_err = float(np.abs(constant_queries(n, dim) - want_enc).max())
    four = [tuple(p) for p in grid_points(4).tolist()]
    want_four = [(1 / 3, 1 / 3), (1 / 3, 2 / 3), (2 / 3, 1 / 3), (2 / 3, 2 / 3)]
    four_ok = np.allclose(four, want_four, rtol=0, atol=QUERY_ATOL)
    ok = grid_err <= QUERY_ATOL and enc_err <= QUERY_ATOL and four_ok
    verdict(capsys, 3, ok, f"grid err {grid_err:.1e}, encoding err {enc_err:.1e} (tol {QUERY_ATOL:.0e}), "
                           f"n=4 grid {np.round(four, 4).tolist()}")
    assert ok


# ---- 4 ----

def brute_argmin(cost: np.ndarray) -> int:
    best = 0
    for q in range(cost.shape[0]):
        if cost[q, 0] < cost[best, 0]:
            best = q
    return best


def random_instance(rng):
    cxcy = rng.uniform(0.1, 0.9, size=(16, 2))
    wh = rng.uniform(0.05, 0.5, size=(16, 2))
    boxes = torch.tensor(np.concatenate([cxcy, wh], 1))
    logits = torch.tensor(rng.normal(size=(16, 2)))
    c, s = rng.uniform(0.2, 0.8, size=2), rng.uniform(0.05, 0.3, size=2)
    target = torch.tensor([c[0] - s[0], c[1] - s[1], c[0] + s[0], c[1] + s[1]])
    return boxes, logits, target


def test_criterion_4_loss_oracles(capsys):
    cases = [((0, 0, 1, 1), (0, 0, 1, 1), 1.0), ((0, 0, 1, 1), (1, 1, 2, 2), -0.5),
             ((0, 0, 2, 2), (1, 1, 2, 2), 0.25)]
    giou_err = max(abs(giou(a, b) - want) for a, b, want in cases)

    rng = np.random.default_rng(2024)
    agree = 0
    for _ in range(N_MATCH_INSTANCES):
        b, l, t = random_instance(rng)
        agree += match(b, l, t).query_for(0) == brute_argmin(matching_cost(b, l, t[None]).numpy())

    b, l, t = random_instance(rng)
    b.requires_grad_(True)
    l.requires_grad_(True)
    matched = torch.tensor([match(b.detach(), l.detach(), t).query_for(0)])
    total_loss(b, l, t, matched=matched).total.backward()
    h = 1e-6
    rels = []
    for leaf, grad in ((b, b.grad), (l, l.grad)):
        fd = torch.zeros_like(leaf)
        for idx in np.ndindex(*leaf.shape):
            vals = []
            for sign in (1, -1):
                bb, ll = b.detach().clone(), l.detach().clone()
                (bb if leaf is b else ll)[idx] += sign * h
                vals.append(float(total_loss(bb, ll, t, matched=matched).total))
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        rels.append(float((grad - fd).norm() / grad.norm()))
    ok = giou_err <= GIOU_ATOL and agree == N_MATCH_INSTANCES and max(rels) < GRAD_RTOL
    verdict(capsys, 4, ok, f"GIoU max err {giou_err:.1e}; Hungarian agrees {agree}/{N_MATCH_INSTANCES}; "
                           f"grad rel err {max(rels):.1e}")
    assert ok


# ---- 5 ----

def test_criterion_5_siri_gain(capsys, comparisons):
    runs = comparisons(1.0)
    base = [b.final_prec for b, _ in runs]
    siri = [s.final_prec for _, s in runs]
    gains = [s - b for b, s in zip(base, siri)]
    ok = statistics.mean(siri) >= statistics.mean(base) and statistics.mean(gains) > 0
    verdict(capsys, 5, ok, f"baseline {[round(x, 3) for x in base]} mean {statistics.mean(base):.3f}; "
                           f"SiRi {[round(x, 3) for x in siri]} mean {statistics.mean(siri):.3f}; "
                           f"mean gain {statistics.mean(gains):+.3f}")
    assert ok


# ---- 6 ----

def test_criterion_6_multitask(capsys, corpus, comparisons, artifacts):
    single = [s.final_prec for _, s in comparisons(1.0)]
    dual, exact = [], True
    imgs, toks, _ = (torch.from_numpy(a) for a in corpus[1].arrays())
    for seed in SEEDS:
        hist = run_multitask_siri(accept_config(seed), "LC", data=corpus, out_dir=artifacts / "multitask" / f"seed{seed}")
        dual.append(hist.final_prec)
        hist.model.eval()
        hist.exported.eval()
        with torch.no_grad():
            a = hist.model(imgs, toks, decoders=("main",))["main"]
            b = hist.exported(imgs, toks)["main"]
        exact &= torch.equal(a.boxes, b.boxes) and torch.equal(a.logits, b.logits)
        exact &= set(hist.exported.D.keys()) == {"main"}
    ok = exact and statistics.mean(dual) >= statistics.mean(single)
    verdict(capsys, 6, ok, f"export bitwise={exact}; L+C {[round(x, 3) for x in dual]} mean "
                           f"{statistics.mean(dual):.3f} vs L {statistics.mean(single):.3f}")
    assert ok


# ---- 7 (soft) ----

def test_criterion_7_small_data(capsys, comparisons, artifacts):
    gains = {}
    for frac in (SMALL_FRACTION, 1.0):
        gains[frac] = [s.final_prec - b.final_prec for b, s in comparisons(frac)]
    small, full = statistics.median(gains[SMALL_FRACTION]), statistics.median(gains[1.0])
    written = []
    for frac in (SMALL_FRACTION, 1.0):
        runs = [artifacts / f"frac{frac:g}" / f"seed{s}" / "siri" for s in SEEDS]
        written += emit_plots(runs, artifacts / "curves" / f"frac{frac:g}")
    ok = small >= full
    verdict(capsys, 7, ok, f"median gain at {SMALL_FRACTION:.0%}: {small:+.3f}, at 100%: {full:+.3f}; "
                           f"curves in {artifacts / 'curves'}", soft=True)
    # soft criterion: the direction is reported, the curves must exist
    assert written and all(p.stat().st_size > 0 for p in written)


# ---- 8 ----

def test_criterion_8_prec_fixture(capsys):
    res = summarize_ious([1.0, 0.6, 0.5, 0.0])
    ok = res.prec_at_05 == 0.5
    verdict(capsys, 8, ok, f"Prec@0.5 = {res.prec_at_05} on IoUs (1.0, 0.6, 0.5, 0.0)")
    assert ok


# ---- 9 ----

def test_criterion_9_determinism(capsys, tmp_path):
    assert cli_main(["generate-data", "--seed", "3", "--train", "96", "--val", "32", "--test", "0",
                     "--out", str(tmp_path / "d")]) == 0
    cfg = RunConfig(model=ACCEPT_MODEL, loss=ACCEPT_LOSS, run_id="det",
                    schedule=replace(ACCEPT_SCHEDULE, initial_epochs=2, retrain_epochs=1, n_periods=2, base_seed=4),
                    data=DataConfig(train_path=str(tmp_path / "d" / "train"), val_path=str(tmp_path / "d" / "val")))
    (tmp_path / "cfg.json").write_text(json.dumps(cfg.to_json()))
    capsys.readouterr()
    for name in ("first", "second"):
        assert cli_main(["run-siri", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    a = read_history(tmp_path / "first" / "det" / "history.jsonl")
    b = read_history(tmp_path / "second" / "det" / "history.jsonl")
    ok = len(a) == 3 and strip_volatile(a) == strip_volatile(b)
    verdict(capsys, 9, ok, f"{len(a)} period records, identical after dropping timestamps: "
                           f"{strip_volatile(a) == strip_volatile(b)}")
    assert ok
