"""The ten acceptance criteria, each at its stated tolerance.

Every test records one ``criterion N: PASS|FAIL ...`` line, shown in the
terminal summary. Run directly (``python3 tests/test_acceptance.py``) or as
part of the normal pytest run.
"""
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from caspl.adapt import VARIANTS, AdaptStrategy, FewShotConfig, run_adapt_phase  # noqa: E402
from caspl.boost import KDConfig, kd_loss, run_boost_phase  # noqa: E402
from caspl.domains import harmonic_mean  # noqa: E402
from caspl.experiments import (  # noqa: E402
    FULL, ExperimentConfig, cascade_benefit, equal_vlp, heldout_pool, unlabeled_sweep,
    validate_csv,
)
from caspl.vlm import zero_shot_probs  # noqa: E402

from conftest import ACCEPTANCE_LINES, DATA, tiny_model  # noqa: E402
from gradcheck import TOL, check_inputs, check_params, kernel_cases, student_case  # noqa: E402

SEEDS50 = range(50)


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def config():
    return ExperimentConfig(cache=os.environ["CASPL_CACHE"])


# ------------------------------------------------------------------------ 1
def test_criterion_01_harmonic_mean_reproduction():
    t0 = time.perf_counter()
    triples = json.loads((DATA / "hm_triples.json").read_text())
    worst = max(abs(harmonic_mean(t["base"], t["novel"]) - t["hm"]) for t in triples)
    spot = abs(harmonic_mean(86.11, 79.54) - 82.69)
    dt = time.perf_counter() - t0
    record(1, worst <= 0.01 and spot <= 0.01 and dt < 1.0,
           f"{len(triples)} published triples, worst |dHM| = {worst:.4f}, {dt * 1e3:.0f} ms")


# ------------------------------------------------------------------------ 2
def test_criterion_02_gradient_fidelity():
    t0 = time.perf_counter()
    worst, where = 0.0, None
    for seed in SEEDS50:
        rng = np.random.default_rng(seed)
        for kind, (fn, arrays) in kernel_cases(rng).items():
            e = check_inputs(fn, arrays)
            if e > worst:
                worst, where = e, f"kernel {kind} seed {seed}"
        model = tiny_model(seed=seed).freeze()
        for variant in VARIANTS:
            e = check_params(*student_case(model, seed, variant, "ce"), rng)
            if e > worst:
                worst, where = e, f"{variant} CE seed {seed}"
        e = check_params(*student_case(model, seed, None, "kd"), rng)
        if e > worst:
            worst, where = e, f"KD seed {seed}"
    dt = time.perf_counter() - t0
    record(2, worst < TOL and dt < 60,
           f"50 seeds, worst rel err {worst:.2e} ({where}), {dt:.1f} s")


# ------------------------------------------------------------------------ 3
def test_criterion_03_kd_properties():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(4, 7))
    exact_zero = kd_loss(f, f).item() == 0.0
    lows = []
    for tau in (0.5, 1.0, 2.0, 4.0):
        for _ in range(100):
            fs, ft = rng.normal(size=(3, 6)) * 4, rng.normal(size=(3, 6)) * 4
            lows.append(kd_loss(fs, ft, tau).item())
    example = kd_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 1.0).item()
    ok = exact_zero and min(lows) >= 0 and abs(example - 0.46212) <= 1e-5
    record(3, ok, f"KL(f,f)=0 {exact_zero}, min over 400 pairs {min(lows):.3g}, "
                  f"unit-gap example {example:.6f}")


# -------------------------------------------------------------------- 4 + 5
@pytest.fixture(scope="module")
def phase_one(world):
    student, teacher, ds = world
    snaps = student.snapshot(), teacher.snapshot()
    t0 = time.perf_counter()
    res = run_boost_phase(student, teacher, ds.unlabeled(seed=0), KDConfig(), seed=0,
                          heldout=heldout_pool(ds))
    return res, snaps, time.perf_counter() - t0


def _unchanged(model, snap):
    return all(model.params[k].data.tobytes() == v.tobytes() for k, v in snap.items())


@pytest.mark.slow
def test_criterion_04_freezing_contract(world, phase_one):
    student, teacher, ds = world
    res, (s_snap, t_snap), _ = phase_one
    boost = res.prompts
    phase1 = _unchanged(student, s_snap) and _unchanged(teacher, t_snap) and boost.frozen
    b_snap = {p.name: p.data.tobytes() for p in boost.parameters()}
    failures = []
    for variant in VARIANTS:
        run_adapt_phase(student, boost, AdaptStrategy.default(variant), FewShotConfig(16, 0), ds,
                        seed=0)
        same_b = all(p.data.tobytes() == b_snap[p.name] for p in boost.parameters())
        if not (same_b and _unchanged(student, s_snap)):
            failures.append(variant)
    record(4, phase1 and not failures,
           f"Phase I touches only boosting: {phase1}; full Phase II in {len(VARIANTS)} "
           f"strategies, violations: {failures or 'none'}")


@pytest.mark.slow
def test_criterion_05_phase_one_learns(phase_one):
    res, _, dt = phase_one
    agree = [100 * h[2] for h in res.history]
    rise = agree[-1] - agree[0]
    record(5, rise >= 10 and dt < 300 and res.history[-1][0] == 20,
           f"held-out agreement {agree[0]:.1f} -> {agree[-1]:.1f} (+{rise:.1f} pts), "
           f"{dt:.0f} s")


# ------------------------------------------------------------------ 6 - 8
@pytest.mark.slow
def test_criterion_06_cascade_benefit(config):
    t0 = time.perf_counter()
    _, summary = cascade_benefit(config)
    dt = time.perf_counter() - t0
    deltas = {r["variant"]: r["delta_hm_mean"] for r in summary}
    ok = all(deltas[v] > 0 for v in ("TextShallow", "IndependentDeep")) and dt < 1800
    record(6, ok, ", ".join(f"{v} dHM {d:+.2f}" for v, d in deltas.items()) +
           f" over {len(config.seeds)} seeds, {dt:.0f} s")


@pytest.mark.slow
def test_criterion_07_equal_prompt_budget(config):
    rows, summary = equal_vlp(config)
    counts = {r["prompt_params"] for r in rows}
    hm = {r["setting"]: r["hm_mean"] for r in summary}
    cascade_hm, adapt_hm = hm["L4 frozen + N4"], hm["N8"]
    ok = len(counts) == 1 and cascade_hm >= adapt_hm
    record(7, ok, f"4 frozen + 4 adapt HM {cascade_hm:.2f} vs 8 adapt {adapt_hm:.2f}, "
                  f"prompt params {sorted(counts)}")


@pytest.mark.slow
def test_criterion_08_unlabeled_quantity(config):
    _, summary = unlabeled_sweep(config, counts=(1, FULL))
    hm = {r["per_class"]: r["hm_mean"] for r in summary}
    record(8, hm[FULL] > hm[1], f"Full pool HM {hm[FULL]:.2f} vs 1 per class {hm[1]:.2f}")


# ------------------------------------------------------------------------ 9
QUICK = {"seeds": [0], "kd": {"epochs": 2},
         "adapt": {"TextShallow": {"epochs": 3}, "IndependentDeep": {"epochs": 1}}}
ABLATE = {"seeds": [0], "kd": {"epochs": 1}, "adapt": {"IndependentDeep": {"epochs": 1}}}


def _cli(*argv):
    proc = subprocess.run([sys.executable, "-m", "caspl.cli", *map(str, argv)],
                          capture_output=True, text=True, env=dict(os.environ))
    assert proc.returncode == 0, proc.stderr
    return proc


@pytest.mark.slow
def test_criterion_09_determinism_and_grids(tmp_path, world):
    quick, ablate = tmp_path / "quick.json", tmp_path / "ablate.json"
    quick.write_text(json.dumps(QUICK))
    ablate.write_text(json.dumps(ABLATE))
    models = os.environ["CASPL_CACHE"]
    files = ["boost/seed0/phase1_metrics.csv", "boost/seed0/boosting.bin",
             "adapt/TextShallow-caspl/seed0/phase2_metrics.csv",
             "adapt/TextShallow-caspl/seed0/report.json", "eval/zero_shot.json",
             "ablate/depth-grid/grid.csv"]
    for run in ("a", "b"):
        common = ["--config", quick, "--out", tmp_path / run, "--models", models]
        _cli("boost", *common)
        _cli("adapt", *common, "--variant", "TextShallow", "--boosting", "auto")
        _cli("eval", *common, "--boosting", "auto")
        _cli("ablate", "depth-grid", "--config", ablate, "--out", tmp_path / run,
             "--models", models)
    diffs = [f for f in files
             if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    _cli("ablate", "length", "--config", ablate, "--out", tmp_path / "a", "--models", models)
    depth = validate_csv(tmp_path / "a/ablate/depth-grid/grid.csv", "depth-grid", 25)
    length = validate_csv(tmp_path / "a/ablate/length/grid.csv", "length", 10)
    record(9, not diffs,
           f"{len(files)} metric files byte-identical across repeats "
           f"(differing: {diffs or 'none'}); depth grid {len(depth)} rows, "
           f"length grid {len(length)} rows, both schema-valid")


# ----------------------------------------------------------------------- 10
def _unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def test_criterion_10_zero_shot_invariance():
    rng = np.random.default_rng(0)
    worst_sum, flips = 0.0, 0
    for _ in range(100):
        B, C, d = rng.integers(1, 6), rng.integers(2, 12), rng.integers(2, 33)
        x, Y = rng.normal(size=(B, d)), rng.normal(size=(C, d))
        tau = float(rng.uniform(0.01, 1.0))
        p = zero_shot_probs(_unit(x), _unit(Y), tau).data
        worst_sum = max(worst_sum, float(np.abs(p.sum(axis=1) - 1).max()))
        ref = p.argmax(axis=1)
        xs = x * rng.uniform(0.01, 100, size=(B, 1))
        Ys = Y * rng.uniform(0.01, 100, size=(C, 1))
        scaled = zero_shot_probs(_unit(xs), _unit(Ys), tau).data.argmax(axis=1)
        tau2 = float(rng.uniform(0.01, 1.0))
        other = zero_shot_probs(_unit(x), _unit(Y), tau2).data.argmax(axis=1)
        flips += int(np.any(scaled != ref)) + int(np.any(other != ref))
    record(10, worst_sum <= 1e-12 and flips == 0,
           f"100 instances, worst |row sum - 1| = {worst_sum:.1e}, argmax changes {flips}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
