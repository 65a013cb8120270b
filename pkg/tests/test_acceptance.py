"""End-to-end acceptance criteria.

Each test records one pass/fail line (shown in the terminal summary) before
asserting, so a red criterion still reports its measured numbers.
"""
import time

import numpy as np
import pytest

from layerens import chipsim as cs
from layerens import ensemble as en
from layerens import harness as hs
from layerens import neuralnet as nn
from layerens.ensemble import POLARITIES

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    return hs.ExperimentConfig(out=str(tmp_path_factory.mktemp("acceptance")))


@pytest.fixture(scope="module")
def data(cfg):
    return hs.dataset_for(cfg)


@pytest.fixture(scope="module")
def trained(cfg, data):
    t0 = time.perf_counter()
    try:
        outcome = hs.cmd_train(cfg, data)
    except nn.NoQualifyingSolution:
        outcome = None
    return outcome, time.perf_counter() - t0


@pytest.fixture(scope="module")
def solution(trained):
    outcome, _ = trained
    if outcome is None:
        pytest.fail("training produced no deployable solution")
    return outcome.solution


@pytest.fixture(scope="module")
def baseline(trained):
    return trained[0].baselines


def test_criterion_1_noiseless_equivalence(solution, data, record_criterion):
    t0 = time.perf_counter()
    chip = cs.new_chip(cs.NoiseConfig.ideal(), ideal=True)
    ens, _ = en.build_ensemble_network(chip, solution, beta=1, g_norm=1.0)
    x = np.vstack([data.test_task1.features, data.test_task2.features])
    p_hw, _ = en.ensemble_forward(chip, ens, x)
    p_sw, _ = nn.forward(solution.effective_network(), x)
    same = np.array_equal(nn.argmax_lowest(p_hw), nn.argmax_lowest(p_sw))
    dev = float(np.abs(p_hw - p_sw).max())
    elapsed = time.perf_counter() - t0
    ok = ens.success and len(x) == 2000 and same and dev <= 1e-9 and elapsed < 10
    record_criterion(1, ok, f"identical predictions on {len(x)}: {same}, max |dp| {dev:.2e}, {elapsed:.1f} s")
    assert ok


@pytest.fixture(scope="module")
def defect_sweep(cfg, solution, data):
    t0 = time.perf_counter()
    res = hs.cmd_defect_sweep(cfg, solution, data)
    return res, time.perf_counter() - t0


def test_criterion_2_defect_sweep(defect_sweep, solution, data, baseline, record_criterion):
    res, elapsed = defect_sweep
    software = hs.software_accuracy(solution, data)["acc_mean"]
    lin = (baseline["task1"] + baseline["task2"]) / 2
    problems = []
    for rate in res.values:
        recs = [r for r in res.records if r["rate"] == rate]
        assert len(recs) == 20
        success = np.mean([r["success"] for r in recs])
        if rate <= 0.30 + 1e-9 and success < 1:
            problems.append(f"success {success:.2f} at {rate:.2f}")
        if abs(rate - 0.35) < 1e-9 and success < 0.9:
            problems.append(f"success {success:.2f} at 0.35")
        if any(r["acc_mean"] != software for r in recs if r["success"]):
            problems.append(f"successful mapping differs from software at {rate:.2f}")
    at40 = [r for r in res.records if abs(r["rate"] - 0.40) < 1e-9]
    failed = [r["acc_mean"] for r in at40 if not r["success"]]
    forced_mean = float(np.mean(failed)) if failed else float("nan")
    if not failed:
        problems.append("no mapping failure at 0.40")
    elif not forced_mean < lin:
        problems.append(f"forced accuracy {forced_mean:.3f} not below baseline {lin:.3f}")
    if elapsed >= 300:
        problems.append(f"runtime {elapsed:.0f} s")
    ok = not problems
    s35 = np.mean([r["success"] for r in res.records if abs(r["rate"] - 0.35) < 1e-9])
    record_criterion(2, ok, (f"success@35% {s35:.2f}, failures@40% {len(failed)}/20, "
                             f"forced mean {forced_mean:.3f} vs linear {lin:.3f}, {elapsed:.0f} s "
                             + "; ".join(problems)).strip())
    assert ok, problems


def test_criterion_3_ensemble_size_scaling(defect_sweep, record_criterion):
    res, _ = defect_sweep
    rates = [r for r in res.values if r <= 0.35 + 1e-9]
    series = sorted(k for k in res.records[0] if k.startswith("alpha_"))
    # one placement: alpha units for alpha series, the largest block for device totals
    tolerance = {k: 1.0 for k in series}
    tolerance["total_devices"] = float(max(a * b for a, b in nn.LAYER_DIMS))
    inversions = []
    for key, tol in tolerance.items():
        means = [res.column(r, key).mean() for r in rates]
        for a, b, r in zip(means, means[1:], rates[1:]):
            if b < a:
                inversions.append((key, r, a - b, a - b <= tol))
    ok = len(inversions) <= 1 and all(small for *_, small in inversions)
    totals = [res.column(r, "total_devices").mean() for r in rates]
    record_criterion(3, ok, f"{len(inversions)} inversion(s); mean devices {totals[0]:.0f} -> {totals[-1]:.0f}")
    assert ok, inversions


def test_criterion_4_training_curves(trained, record_criterion):
    outcome, elapsed = trained
    assert outcome is not None, "no quantized EWC network beats the linear baseline on both tasks"
    base = outcome.baselines
    sgd, ewc = outcome.final_means("SGD"), outcome.final_means("EWC")
    assert len(outcome.histories["EWC"]) == len(outcome.histories["SGD"]) == 20
    acc = outcome.solution.source_accuracy
    sel = (acc["task1"] + acc["task2"]) / 2
    ok = (sgd["task1"] < base["task1"] and ewc["task1"] > base["task1"] and ewc["task2"] > base["task2"]
          and sel >= 0.70 and elapsed < 180)
    record_criterion(4, ok, (f"SGD t1 {sgd['task1']:.3f}, EWC {ewc['task1']:.3f}/{ewc['task2']:.3f}, "
                             f"linear {base['task1']:.3f}/{base['task2']:.3f}, selected {sel:.3f}, {elapsed:.0f} s"))
    assert ok


def test_criterion_5_beta_sweep(cfg, solution, data, record_criterion):
    t0 = time.perf_counter()
    res = hs.cmd_beta_sweep(cfg, solution, data)
    elapsed = time.perf_counter() - t0
    summ = res.summary()
    means = [s["mean"] for s in summ]
    stds = [s["std"] for s in summ]
    monotone = hs.non_decreasing_within(means, stds)
    software = res.extra["software"]["acc_mean"]
    b3 = summ[res.values.index(3)]["mean"]
    ok = monotone and abs(b3 - software) <= 0.02 and elapsed < 180
    assert cfg.noise_preset == "hardware-like" and cfg.beta_sweep_fault_rate > 0
    record_criterion(5, ok, ("means " + " ".join(f"{m:.3f}" for m in means)
                             + f", beta=3 {b3:.3f} vs software {software:.3f}, {elapsed:.0f} s"))
    assert ok


def test_criterion_6_gnorm_sweep(cfg, solution, data, baseline, record_criterion):
    t0 = time.perf_counter()
    res = hs.cmd_gnorm_sweep(cfg, solution, data)
    elapsed = time.perf_counter() - t0
    g = np.array(res.values)
    i1 = int(np.flatnonzero(g == 1.0)[0])
    ideal = hs.model_summary(res, "ideal")
    t1, t2 = hs.model_summary(res, "ideal", "acc_task1"), hs.model_summary(res, "ideal", "acc_task2")
    above = (t1 > baseline["task1"]) & (t2 > baseline["task2"])
    lo = hi = i1
    while lo > 0 and above[lo - 1]:
        lo -= 1
    while hi < len(g) - 1 and above[hi + 1]:
        hi += 1
    peak_at_1 = ideal[i1] >= ideal.max()
    endpoints = ideal[0] <= ideal[i1] and ideal[-1] <= ideal[i1]
    ok = peak_at_1 and bool(above[i1]) and endpoints and elapsed < 180
    best = g[int(np.argmax(ideal))]
    record_criterion(6, ok, (f"ideal at 1 {ideal[i1]:.4f}, max {ideal.max():.4f} at g_norm {best:.3f}; "
                             f"above-baseline window [{g[lo]:.3f}, {g[hi]:.3f}]; "
                             f"endpoints {ideal[0]:.3f}/{ideal[-1]:.3f}; {elapsed:.0f} s"))
    assert ok


def test_criterion_7_vmm_fidelity(cfg, record_criterion):
    exact = hs.cmd_vmm_validate(cfg, ideal=True, write=False)
    noisy = hs.cmd_vmm_validate(cfg)
    assert noisy.theoretical.shape == (100, 25)
    ok = exact.max_rel_error <= 1e-12 and 0.99 <= noisy.slope <= 1.01 and noisy.r2 >= 0.999
    record_criterion(7, ok, (f"noiseless rel err {exact.max_rel_error:.1e}, slope {noisy.slope:.5f}, "
                             f"R^2 {noisy.r2:.6f}"))
    assert ok


# --------------------------------------------------------------------------
# criterion 8: property suites


def _gradient_check(rng) -> float:
    def loss(net):
        return nn.cross_entropy(net, x, y)

    worst = 0.0
    for _ in range(20):
        net = nn.Network([rng.normal(0, 0.7, s) for s in nn.LAYER_DIMS])
        x, y = rng.uniform(0, 2, (4, 4)), rng.integers(0, 3, 4)
        for l, ga in enumerate(nn.backprop(net, x, y)):
            gn = np.zeros_like(ga)
            for idx in np.ndindex(ga.shape):
                p, m = net.copy(), net.copy()
                p.weights[l][idx] += 1e-5
                m.weights[l][idx] -= 1e-5
                gn[idx] = (loss(p) - loss(m)) / 2e-5
            worst = max(worst, np.linalg.norm(ga - gn) / max(np.linalg.norm(gn), np.linalg.norm(ga), 1e-12))
    return worst


def _fuzz_violations(rng, n=1000) -> int:
    bad = 0
    for _ in range(n):
        bitmap = rng.random((32, 25, 25)) < rng.uniform(0, 0.5)
        shape = (int(rng.integers(1, 26)), int(rng.integers(1, 26)))
        beta = int(rng.integers(1, 5))
        avoid = [cs.Region(int(rng.integers(0, 32)), int(rng.integers(0, 20)), int(rng.integers(0, 20)), 5, 5)]
        m = en.find_layer_ensemble(bitmap, shape, beta, avoid)
        occ = np.zeros(bitmap.shape, int)
        for r in avoid:
            occ[r.index()] += 1
        for pol in POLARITIES:
            for pl in m.placements[pol]:
                if pl.row_offset < 0 or pl.col_offset < 0 or pl.row_offset + pl.n_rows > 25 or pl.col_offset + pl.n_cols > 25:
                    bad += 1
                    continue
                occ[pl.index()] += 1
                brute = ~bitmap[pl.kernel_id, pl.rows, pl.cols].any(axis=1)
                bad += int(not np.array_equal(brute, m.clean_mask[pol][pl.copy_index]))
        bad += int(occ.max() > 1)
        met = all((m.clean_counts(p) >= beta).all() for p in POLARITIES)
        bad += int(met != m.success)
    return bad


def _stuck_independence(rng) -> bool:
    sol = nn.TernarySolution([rng.integers(-1, 2, s) for s in nn.LAYER_DIMS], [0.8, 0.5, 1.1])
    chip = cs.new_chip(cs.NoiseConfig.ideal(), ideal=True)
    cs.inject_faults(chip, 0.25, cs.Fault.STUCK_HIGH, seed=int(rng.integers(1 << 30)))
    ens, _ = en.build_ensemble_network(chip, sol)
    x = rng.uniform(0, 2, (100, 4))
    _, before = en.ensemble_forward(chip, ens, x)
    chip.conductance[chip.fault_bitmap] = rng.uniform(0, 3000, int(chip.fault_bitmap.sum()))
    _, after = en.ensemble_forward(chip, ens, x)
    return ens.success and all(np.array_equal(a, b) for a, b in zip(before, after))


def _variance_ratios(rng) -> list[float]:
    sigma = 1.5
    chip = cs.new_chip(cs.NoiseConfig(prog_sigma=0.0, read_current_sigma=sigma, seed=int(rng.integers(1 << 30))))
    t = rng.integers(-1, 2, (6, 3))
    ratios = []
    for beta in (1, 2, 3, 4):
        m = en.find_layer_ensemble(chip.fault_bitmap, (3, 6), beta)
        en.write_ensemble(chip, m, t)
        x = np.repeat(rng.uniform(-1, 1, (1, 6)), 2000, axis=0)
        i_pos, i_neg = en.ensemble_vmm(chip, m, x)
        for cur in (i_pos, i_neg):
            ratios.extend(cur.var(axis=0, ddof=1) / (sigma**2 / beta))
    return ratios


def _vmm_oracle_error(rng) -> float:
    chip = cs.new_chip(cs.NoiseConfig.ideal(), ideal=True)
    chip.conductance[:] = rng.uniform(100, 300, chip.conductance.shape)
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(32))
        v1, v2 = rng.uniform(-0.15, 0.15, (2, 25))
        a, b = rng.uniform(-1, 1, 2)
        got = cs.kernel_vmm(chip, k, v1)
        oracle = np.array([sum(chip.conductance[k, r, c] * v1[c] for c in range(25)) for r in range(25)])
        lin = cs.kernel_vmm(chip, k, a * v1 + b * v2) - (a * got + b * cs.kernel_vmm(chip, k, v2))
        scale = np.abs(chip.conductance[k]) @ (np.abs(v1) + np.abs(v2))
        worst = max(worst, np.max(np.abs(got - oracle) / scale), np.max(np.abs(lin) / scale))
    return worst


def test_criterion_8_property_suites(record_criterion):
    rng = np.random.default_rng(2024)
    grad = _gradient_check(rng)
    fuzz = _fuzz_violations(rng)
    stuck = all(_stuck_independence(rng) for _ in range(5))
    ratios = np.array(_variance_ratios(rng))
    vmm = _vmm_oracle_error(rng)
    var_ok = bool(np.all(np.abs(ratios - 1) <= 0.25))
    ok = grad <= 1e-5 and fuzz == 0 and stuck and var_ok and vmm <= 1e-12
    record_criterion(8, ok, (f"grad rel err {grad:.1e}, fuzz violations {fuzz}/1000, stuck-independent {stuck}, "
                             f"variance ratio {ratios.min():.2f}..{ratios.max():.2f}, vmm err {vmm:.1e}"))
    assert ok
