"""Acceptance criteria 1-10, each printed as one PASS/FAIL line.

Criteria 1 and 2 run the oracle and bound suites under a one minute budget.
Criteria 3-9 are recomputed from the metrics of a full ``reproduce-all`` run on
the acceptance profile; criterion 10 runs it a second time and compares bytes.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from t2ue.pipeline import acceptance_profile, reproduce_all

ROOT = Path(__file__).resolve().parent.parent
CHANCE = 100.0 / 16


def _line(capsys, name, passed, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if passed else 'FAIL'} {name}: {detail}")


def _suite(selection: list[str]) -> tuple[bool, float, str]:
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *selection],
                          cwd=ROOT, capture_output=True, text=True)
    seconds = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    return proc.returncode == 0, seconds, tail


def test_criterion_1_unit_oracles(capsys):
    ok, seconds, tail = _suite(["tests/test_nn_core.py",
                                "tests/test_evalkit.py::test_rank_examples",
                                "tests/test_evalkit.py::test_median_rank_examples",
                                "tests/test_evalkit.py::test_hit_at_k_example",
                                "tests/test_evalkit.py::test_diagonal_ranks_match_scalar_rule"])
    passed = ok and seconds < 60
    _line(capsys, "1_unit_oracles", passed, f"{tail}; wall {seconds:.1f}s (limit 60s)")
    assert passed


def test_criterion_2_hard_bound(capsys):
    ok, seconds, tail = _suite(["tests/test_generator.py::test_bound_holds_over_1000_maps_before_and_after_quantization",
                                "tests/test_generator.py::test_quantize_properties",
                                "tests/test_protector.py::test_export_round_trip_bit_exact",
                                "tests/test_protector.py::test_exported_pixels_within_bound_for_saturated_generator"])
    passed = ok and seconds < 60
    _line(capsys, "2_hard_bound", passed, f"{tail}; wall {seconds:.1f}s (limit 60s)")
    assert passed


@pytest.fixture(scope="module")
def acceptance_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    first = reproduce_all(acceptance_profile(), root / "first", timing=True)
    reproduce_all(acceptance_profile(), root / "second", timing=False)
    report = json.loads((root / "first" / "report.json").read_text())
    return {"root": root, "report": report, "timing": first["timing"]}


def _metric(report, run_id):
    return report["runs"][run_id]["metrics"]["final_test_metric"]


def _agree(report, key, passed):
    # the pipeline's own verdict must match the independent recomputation
    assert report["criteria"][key]["passed"] == passed


@pytest.mark.slow
def test_criterion_3_contrastive_protection(acceptance_runs, capsys):
    r = acceptance_runs["report"]
    clean, t2ue = _metric(r, "contrastive_clean"), _metric(r, "contrastive_t2ue_sample_wise")
    rand = _metric(r, "contrastive_random")
    passed = clean >= 80 and t2ue <= 0.5 * clean and abs(rand - clean) <= 10
    _line(capsys, "3_contrastive_protection", passed,
          f"clean I2T Hit@1 {clean:.2f} (>= 80), sample-wise T2UE {t2ue:.2f} (<= {0.5 * clean:.2f}), "
          f"random {rand:.2f} (within 10 of clean)")
    _agree(r, "3_contrastive_protection", passed)
    assert passed


@pytest.mark.slow
def test_criterion_4_supervised_transfer(acceptance_runs, capsys):
    r = acceptance_runs["report"]
    clean, t2ue = _metric(r, "supervised_clean"), _metric(r, "supervised_t2ue_class_wise")
    em = _metric(r, "supervised_em")
    flags = r["runs"]["supervised_em"]["zero_contact"] is False and \
        r["runs"]["supervised_t2ue_class_wise"]["zero_contact"] is True
    passed = clean >= 90 and t2ue <= CHANCE + 10 and em <= CHANCE + 10
    _line(capsys, "4_supervised_transfer", passed and flags,
          f"clean {clean:.2f} (>= 90), class-wise T2UE {t2ue:.2f}, EM {em:.2f} flagged non-zero-contact "
          f"(both <= {CHANCE + 10:.2f})")
    _agree(r, "4_supervised_transfer", passed)
    assert passed and flags


@pytest.mark.slow
def test_criterion_5_architecture_transfer(acceptance_runs, capsys):
    r = acceptance_runs["report"]
    accs = {"conv4": _metric(r, "supervised_t2ue_class_wise"),
            "conv6-wide": _metric(r, "supervised_t2ue_class_wise_conv6-wide"),
            "conv4-residual": _metric(r, "supervised_t2ue_class_wise_conv4-residual")}
    passed = all(v <= CHANCE + 10 for v in accs.values())
    _line(capsys, "5_architecture_transfer", passed,
          ", ".join(f"{a} {v:.2f}" for a, v in accs.items()) + f" (each <= {CHANCE + 10:.2f})")
    _agree(r, "5_architecture_transfer", passed)
    assert passed


@pytest.mark.slow
def test_criterion_6_poison_ratio(acceptance_runs, capsys):
    r = acceptance_runs["report"]
    accs = {0.0: _metric(r, "supervised_clean"), 1.0: _metric(r, "supervised_t2ue_class_wise")}
    for ratio in (0.2, 0.4, 0.6, 0.8):
        accs[ratio] = _metric(r, f"ratio_{ratio:.1f}")
    ratios = sorted(accs)
    steps_ok = all(accs[b] <= accs[a] + 3 for a, b in zip(ratios, ratios[1:]))
    passed = steps_ok and accs[1.0] <= CHANCE + 10
    _line(capsys, "6_poison_ratio_monotone", passed,
          ", ".join(f"{k:.1f}: {accs[k]:.2f}" for k in ratios) + f" (3-point step tolerance, end <= {CHANCE + 10:.2f})")
    _agree(r, "6_poison_ratio_monotone", passed)
    assert passed


@pytest.mark.slow
def test_criterion_7_defenses(acceptance_runs, capsys):
    r = acceptance_runs["report"]
    accs = {d: _metric(r, f"defense_{d}") for d in ("cutout", "mixup")}
    passed = all(v <= CHANCE + 15 for v in accs.values())
    _line(capsys, "7_defense_robustness", passed,
          ", ".join(f"{d} {v:.2f}" for d, v in accs.items()) + f" (each <= {CHANCE + 15:.2f})")
    _agree(r, "7_defense_robustness", passed)
    assert passed


@pytest.mark.slow
def test_criterion_8_checkpoint_sweep(acceptance_runs, capsys):
    r = acceptance_runs["report"]
    curve = sorted(r["runs"]["sweep"]["metrics"].items())
    (first_e, first), (last_e, last) = curve[0], curve[-1]
    passed = len(curve) >= 2 and first - last >= 20
    _line(capsys, "8_checkpoint_sweep", passed,
          f"{first_e} acc {first:.2f} -> {last_e} acc {last:.2f} (drop >= 20 required)")
    _agree(r, "8_checkpoint_sweep", passed)
    assert passed


@pytest.mark.slow
def test_criterion_9_timing(acceptance_runs, capsys):
    t = acceptance_runs["timing"]
    s = t["seconds"]
    speedup = s["em"] / s["t2ue"]
    passed = speedup >= 3 and s["random"] < s["t2ue"] < s["em"]
    _line(capsys, "9_timing", passed,
          f"{t['samples']} samples, median of {t['reps']}: random {s['random']:.4f}s, t2ue {s['t2ue']:.4f}s, "
          f"em {s['em']:.4f}s, em/t2ue {speedup:.1f}x (>= 3)")
    assert passed


@pytest.mark.slow
def test_criterion_10_determinism(acceptance_runs, capsys):
    root = acceptance_runs["root"]
    a, b = (root / "first" / "report.json").read_bytes(), (root / "second" / "report.json").read_bytes()
    passed = a == b
    _line(capsys, "10_determinism", passed, f"report.json {len(a)} bytes, identical across two runs: {passed}")
    assert passed
