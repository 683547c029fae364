"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trend criteria run the default desk sweep (both target distances, five
seeds) once per session; expect several minutes on one core.
"""
import math
import time

import numpy as np
import pytest

from lnadapt.adapters import AdapterKind, FullLnAdapter, LrpdAdapter, param_count
from lnadapt.cli import main
from lnadapt.corpus import make_speaker, synthesize_corpus
from lnadapt.metrics import f0_rmse, mcd, overall_mse, uv_error
from lnadapt.model import ModelConfig, build_model, insert_adapters
from lnadapt.nn import BlstmLayer, DenseLayer, LstmCell, grad_check
from lnadapt.sweep import ExperimentConfig, run_sweep
from lnadapt.training import TrainConfig, adapt, train_sd

SYSTEM_KINDS = {"OL": None, "OL+Full-LN": AdapterKind.full(), "OL+LRPD-LN": AdapterKind.lrpd(10)}


# -- 1 ------------------------------------------------------------------------


def _grad_cases(seed):
    rng = np.random.default_rng([seed, 17])
    n_in = int(rng.integers(2, 6))
    hid = int(rng.integers(2, 5))
    k = int(rng.integers(3, 8))
    T = int(rng.integers(1, 6))
    return {
        "dense": (DenseLayer.init(n_in, hid, rng, "tanh"), rng.standard_normal((T, n_in))),
        "lstm": (LstmCell.init(n_in, hid, rng), rng.standard_normal((T, n_in))),
        "blstm": (BlstmLayer.init(n_in, 2 * hid, rng), rng.standard_normal((T, n_in))),
        "full-ln": (FullLnAdapter(np.eye(k) + 0.3 * rng.standard_normal((k, k)), rng.standard_normal(k)), rng.standard_normal((T, k))),
        "lrpd": (
            LrpdAdapter(rng.standard_normal((k, 2)), rng.standard_normal((2, k)), rng.standard_normal(k)),
            rng.standard_normal((T, k)),
        ),
    }


def test_criterion_1_gradient_correctness(criterion):
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        for name, (block, x) in _grad_cases(seed).items():
            err = grad_check(block, x, eps=1e-5).max_error
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    assert criterion(1, "gradient correctness", ok, detail)


# -- 2 ------------------------------------------------------------------------


def test_criterion_2_identity_insertion(criterion):
    model = build_model(ModelConfig(), seed=11)
    n_blstm = len(model.cfg.blstm_widths)
    slots = ("after_dense",) + tuple(f"between_blstm({i})" for i in range(n_blstm - 1)) + ("before_output",)
    adapted = insert_adapters(model, slots, AdapterKind.full(), seed=3)
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((int(rng.integers(1, 80)), model.cfg.input_dim))
        a, b = model.forward(x), adapted.forward(x)
        worst = max(worst, max(float(np.max(np.abs(a[s] - b[s]), initial=0.0)) for s in a))
    ok = worst == 0.0 and len(adapted.adapters()) == model.n_boundaries
    assert criterion(2, "identity insertion", ok, f"{len(adapted.adapters())} slots, max abs deviation {worst!r}")


# -- 3 ------------------------------------------------------------------------


def test_criterion_3_frozen_base(criterion):
    src_corpus = synthesize_corpus(make_speaker(1, 0.0), 80, seed=5, n_valid=10, n_test=2)
    source, _ = train_sd(ModelConfig(), src_corpus, TrainConfig(epochs=4))
    target = synthesize_corpus(make_speaker(2, 0.5), 60, seed=6, n_valid=10, n_test=2)
    before = {k: v.copy() for k, v in source.trunk_blocks().items()}
    results = []
    for system, kind in SYSTEM_KINDS.items():
        for n in (5, 48):
            ids = target.splits["train"][:n]
            model, _ = adapt(source, target, kind, tcfg=TrainConfig(learning_rate=0.5, lr_decay=0.9, epochs=5), train_ids=ids)
            same = all(np.array_equal(v, before[k]) for k, v in model.trunk_blocks().items())
            results.append(same and set(model.trunk_blocks()) == set(before))
    assert criterion(3, "frozen base", all(results), f"{len(results)} adaptation runs, trunk bitwise unchanged in {sum(results)}")


# -- 4 ------------------------------------------------------------------------


def test_criterion_4_parameter_accounting(criterion):
    full = param_count(AdapterKind.full(), 1024)
    lrpd = param_count(AdapterKind.lrpd(10), 1024)
    ratio = lrpd / full
    ok = full == 1_048_576 and lrpd == 21_504 and ratio < 0.18
    assert criterion(4, "parameter accounting", ok, f"full {full}, lrpd(10) {lrpd}, ratio {ratio:.4f}")


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_lrpd_full_equivalence(criterion):
    worst, n = 0.0, 0
    for k in range(2, 17):
        for r in range(1, k):
            for seed in range(3):
                rng = np.random.default_rng([k, r, seed])
                a = LrpdAdapter(rng.standard_normal((k, r)), rng.standard_normal((r, k)), rng.standard_normal(k))
                full = FullLnAdapter(a.u @ a.v + np.eye(k), a.b)
                h = rng.standard_normal((6, k))
                worst = max(worst, float(np.max(np.abs(a.forward(h) - full.forward(h)))))
                n += 1
    assert criterion(5, "LRPD-Full equivalence", worst <= 1e-12, f"{n} configs, max abs diff {worst:.1e}")


# -- 6 ------------------------------------------------------------------------


def _oracle_mcd(ref, hyp):
    total = 0.0
    for r, h in zip(ref, hyp):
        total += 10.0 / math.log(10.0) * math.sqrt(2.0 * sum((a - b) ** 2 for a, b in zip(r[1:], h[1:])))
    return total / len(ref)


def _oracle_f0(ref, hyp, ruv, huv):
    sq = [(math.exp(a) - math.exp(b)) ** 2 for a, b, u, v in zip(ref, hyp, ruv, huv) if u > 0.5 and v > 0.5]
    return math.sqrt(sum(sq) / len(sq)) if sq else 0.0


def _oracle_uv(ref, hyp):
    return sum((a > 0.5) != (b > 0.5) for a, b in zip(ref, hyp)) / len(ref)


def _oracle_mse(p, t):
    per = []
    for s in p:
        flat = [(a - b) ** 2 for ra, rb in zip(p[s], t[s]) for a, b in zip(ra, rb)]
        per.append(sum(flat) / len(flat))
    return sum(per) / len(per)


def test_criterion_6_metric_oracles(criterion):
    rng = np.random.default_rng(60)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(1, 30))
        rc, hc = rng.standard_normal((T, 12)), rng.standard_normal((T, 12))
        rf, hf = rng.normal(5.3, 0.3, T), rng.normal(5.3, 0.3, T)
        ruv, huv = (rng.random(T) > 0.4).astype(float), rng.uniform(-0.3, 1.3, T)
        dims = {"mcep": 12, "lf0": 3, "bap": 4, "uv": 1}
        p = {s: rng.standard_normal((T, d)) for s, d in dims.items()}
        t = {s: rng.standard_normal((T, d)) for s, d in dims.items()}
        worst = max(
            worst,
            abs(mcd(rc, hc) - _oracle_mcd(rc.tolist(), hc.tolist())),
            abs(f0_rmse(rf, hf, ruv, huv) - _oracle_f0(rf, hf, ruv, huv)),
            abs(uv_error(ruv, huv) - _oracle_uv(ruv, huv)),
            abs(overall_mse(p, t) - _oracle_mse(p, t)),
        )
    one = np.zeros((1, 5))
    shifted = one.copy()
    shifted[0, 3] = 1.0
    single = mcd(one, shifted)
    ok = worst <= 1e-10 and abs(single - 6.1421) < 1e-3
    assert criterion(6, "metric oracles", ok, f"max oracle deviation {worst:.1e}, single-dim MCD {single:.4f} dB")


# -- 7, 8 -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_sweep():
    cfg = ExperimentConfig.load("configs/desk.ini") if _has_desk_config() else ExperimentConfig()
    start = time.perf_counter()
    report = run_sweep(cfg)
    return report, time.perf_counter() - start


def _has_desk_config():
    import os

    return os.path.exists("configs/desk.ini")


def _checks(report, distance):
    return {c.name: c for c in report.checks if c.distance == distance}


def test_criterion_7_easy_task_trends(desk_sweep, criterion):
    report, elapsed = desk_sweep
    checks = _checks(report, 0.2)
    names = ("adaptation_beats_sd", "ol_gap_grows", "lrpd_small_full_large")
    ok = all(checks[n].status == "PASS" for n in names)
    detail = "; ".join(checks[n].line for n in names) + f"; sweep {elapsed:.0f}s"
    assert criterion(7, "easy-task trends", ok, detail)


def test_criterion_8_tough_task_trends(desk_sweep, criterion):
    report, _ = desk_sweep
    checks = _checks(report, 0.8)
    harder = [c for c in report.checks if c.name == "harder_task_is_harder"]
    lines = [checks["adaptation_beats_sd"], checks["lrpd_small_full_large"], *harder]
    ok = all(c.status == "PASS" for c in lines)
    assert criterion(8, "tough-task trends", ok, "; ".join(c.line for c in lines))


# -- 9 ------------------------------------------------------------------------


DETERMINISM_CONFIG = """
[source]
n_utts = 40
epochs = 3

[target]
distances = 0.2, 0.8
pool = 20
n_valid = 6
n_test = 2

[grid]
sizes = 5, 20
seeds = 0, 1

[train]
epochs = 3
"""


def test_criterion_9_sweep_determinism(tmp_path, criterion):
    cfg = tmp_path / "sweep.ini"
    cfg.write_text(DETERMINISM_CONFIG)
    outs = []
    for name in ("first", "second"):
        main(["sweep", "--config", str(cfg), "--out", str(tmp_path / name)])
        outs.append((tmp_path / name / "sweep.csv").read_bytes())
    rows = outs[0].decode().count("\n") - 1
    ok = outs[0] == outs[1] and rows == 2 * 4 * 2 * 2
    assert criterion(9, "sweep determinism", ok, f"{rows} rows, identical bytes: {outs[0] == outs[1]}")
