import json

import numpy as np
import pytest

from layerens import chipsim as cs
from layerens import harness as hs
from layerens import neuralnet as nn


def small_config(tmp_path, **kw):
    base = dict(n_train=300, n_test=100, n_networks=3, epochs_per_task=3, repeats=2,
                fault_rates=[0.0, 0.2], betas=[1, 2], g_norms=[0.5, 1.0, 2.0],
                vmm_vectors=10, vmm_measurements=5, vmm_map_reads=10, out=str(tmp_path))
    base.update(kw)
    return hs.ExperimentConfig(**base)


def random_solution(seed=0):
    rng = np.random.default_rng(seed)
    return nn.TernarySolution([rng.integers(-1, 2, s) for s in nn.LAYER_DIMS], [0.9, 0.6, 1.3])


def install_solution(cfg, sol):
    d = cfg.out_dir / "train"
    d.mkdir(parents=True, exist_ok=True)
    hs.save_solution(sol, d / "selected_solution.json")
    (d / "baseline.json").write_text(json.dumps({"task1": 0.6, "task2": 0.6}))


def test_config_defaults_and_validation():
    cfg = hs.ExperimentConfig()
    assert cfg.repeats == 20 and cfg.betas == [1, 2, 3, 4]
    assert cfg.fault_rates == [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4]
    assert 1.0 in cfg.g_norms and min(cfg.g_norms) == 0.25 and max(cfg.g_norms) == 4.0
    with pytest.raises(ValueError):
        hs.ExperimentConfig(repeats=0)
    with pytest.raises(ValueError):
        hs.ExperimentConfig(betas=[])
    with pytest.raises(ValueError):
        hs.ExperimentConfig(noise_preset="loud")
    with pytest.raises(ValueError):
        hs.ExperimentConfig.from_dict({"sed": 1})


def test_config_json_round_trip_and_hash(tmp_path):
    cfg = hs.ExperimentConfig(seed=3, repeats=5)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = hs.ExperimentConfig.from_json(path)
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert hs.ExperimentConfig(seed=3, repeats=5, out="elsewhere", threads=4).config_hash() == cfg.config_hash()
    assert hs.ExperimentConfig(seed=4, repeats=5).config_hash() != cfg.config_hash()
    path.write_text("[1, 2]")
    with pytest.raises(ValueError):
        hs.ExperimentConfig.from_json(path)


def test_solution_and_network_files(tmp_path):
    sol = random_solution()
    sol.source_accuracy = {"task1": 0.7, "task2": 0.71}
    hs.save_solution(sol, tmp_path / "s.json")
    back = hs.load_solution(tmp_path / "s.json")
    for a, b in zip(sol.ternary_weights, back.ternary_weights):
        np.testing.assert_array_equal(a, b)
    assert back.layer_scales == sol.layer_scales and back.source_accuracy == sol.source_accuracy
    net = nn.init_network(1)
    hs.save_network(net, tmp_path / "n.json")
    for a, b in zip(net.weights, hs.load_network(tmp_path / "n.json").weights):
        np.testing.assert_array_equal(a, b)
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ValueError):
        hs.load_solution(tmp_path / "bad.json")


def test_sweep_result_repeat_invariant():
    recs = [{"beta": 1, "acc_mean": 0.5}, {"beta": 1, "acc_mean": 0.7}]
    res = hs.SweepResult("beta", [1], recs, 2)
    assert res.summary() == [{"beta": 1, "mean": 0.6, "std": pytest.approx(0.1), "n": 2}]
    with pytest.raises(ValueError):
        hs.SweepResult("beta", [1], recs[:1], 2)


def test_monotonicity_helpers():
    assert hs.non_decreasing_within([0.5, 0.49, 0.6], [0.0, 0.02, 0.0])
    assert not hs.non_decreasing_within([0.5, 0.4], [0.0, 0.05])
    assert hs.count_inversions([1, 2, 1.5, 3], 1.0) == (1, True)
    assert hs.count_inversions([1, 3, 1], 1.0) == (1, False)


def test_training_writes_histories(tmp_path):
    cfg = small_config(tmp_path)
    data = hs.dataset_for(cfg)
    try:
        o = hs.cmd_train(cfg, data)
    except nn.NoQualifyingSolution:
        o = None
    files = sorted((cfg.out_dir / "train").glob("history_*.csv"))
    assert len(files) == 2 * cfg.n_networks
    header = files[0].read_text().splitlines()[0]
    assert header == "epoch,method,task1_acc,task2_acc,loss"
    assert len(files[0].read_text().splitlines()) == 1 + 2 * cfg.epochs_per_task
    assert (cfg.out_dir / "train" / "baseline.json").exists()
    if o is not None:
        assert (cfg.out_dir / "train" / "selected_solution.json").exists()


def test_defect_sweep_rate_zero_equals_software(tmp_path):
    cfg = small_config(tmp_path)
    data = hs.dataset_for(cfg)
    sol = random_solution()
    res = hs.cmd_defect_sweep(cfg, sol, data)
    sw = hs.software_accuracy(sol, data)
    for r in res.records:
        assert r["success"] == 1
        assert r["acc_mean"] == sw["acc_mean"]
    rows = hs.read_rows(cfg.out_dir / "sweeps" / "defects.csv")
    assert len(rows) == 4 and rows[0]["config_hash"] == cfg.config_hash()
    assert rows[0]["version"] == hs.tool_version()


def test_sweeps_reproducible_and_thread_independent(tmp_path):
    data = hs.dataset_for(small_config(tmp_path))
    sol = random_solution(1)
    a = hs.cmd_beta_sweep(small_config(tmp_path / "a"), sol, data, write=False)
    b = hs.cmd_beta_sweep(small_config(tmp_path / "b", threads=3), sol, data, write=False)
    assert a.records == b.records
    assert a.extra["ideal"] == a.extra["software"]


def test_gnorm_sweep_ideal_at_one_matches_software(tmp_path):
    cfg = small_config(tmp_path)
    data = hs.dataset_for(cfg)
    sol = random_solution(2)
    res = hs.cmd_gnorm_sweep(cfg, sol, data)
    ideal = hs.model_summary(res, "ideal")
    assert ideal[cfg.g_norms.index(1.0)] == pytest.approx(hs.software_accuracy(sol, data)["acc_mean"])
    assert len(res.records) == 2 * len(cfg.g_norms) * cfg.repeats


def test_vmm_validation_noiseless_and_noisy(tmp_path):
    cfg = small_config(tmp_path, vmm_vectors=100, vmm_measurements=20, vmm_map_reads=1000)
    exact = hs.cmd_vmm_validate(cfg, ideal=True, write=False)
    assert exact.max_rel_error <= 1e-12 and exact.rmse <= 1e-9
    noisy = hs.cmd_vmm_validate(cfg)
    sigma = cs.NoiseConfig().read_current_sigma
    within = np.abs(noisy.measured - noisy.theoretical) <= 4 * sigma / np.sqrt(20)
    assert within.mean() >= 0.99
    assert 0.99 <= noisy.slope <= 1.01
    assert len(hs.read_rows(cfg.out_dir / "sweeps" / "vmm.csv")) == 100 * 25


def test_report_partial_then_complete(tmp_path):
    cfg = small_config(tmp_path)
    _, lines, ok = hs.cmd_report(cfg)
    assert not ok and sum(l.startswith("MISSING") for l in lines) == 5
    install_solution(cfg, random_solution())
    data = hs.dataset_for(cfg)
    hs.cmd_vmm_validate(cfg)
    _, lines, _ = hs.cmd_report(cfg)
    assert sum(l.startswith("MISSING") for l in lines) == 4
    assert any("vmm" in l and l.startswith(("PASS", "FAIL")) for l in lines)

    sol, _ = hs.load_selected(cfg)
    hs.cmd_defect_sweep(cfg, sol, data)
    hs.cmd_beta_sweep(cfg, sol, data)
    hs.cmd_gnorm_sweep(cfg, sol, data)
    rows = []
    for method in nn.METHODS:
        h = nn.TrainHistory(method, 0, [0.5, 0.6], [0.5, 0.7], [1.0, 0.9])
        rows += [{"seed": 0, **r} for r in h.rows()]
    hs.write_rows(cfg.out_dir / "sweeps" / "training.csv", rows, cfg)
    written, lines, _ = hs.cmd_report(cfg)
    names = sorted(p.name for p in written)
    assert names == sorted(["fig1c.csv", "fig4f.csv", "fig5b.csv", "fig5c.csv", "fig5d.csv",
                            "fig6a.csv", "fig6e.csv", "summary.txt"])
    assert not any(l.startswith("MISSING") for l in lines)
    before = {p.name: p.read_bytes() for p in written}
    written2, _, _ = hs.cmd_report(cfg)
    assert {p.name: p.read_bytes() for p in written2} == before


def test_cli_pipeline(tmp_path, capsys):
    cfg = small_config(tmp_path / "out")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    common = ["--config", str(cfg_path)]
    assert hs.main(common + ["gen-data"]) == 0
    assert (cfg.out_dir / "data" / "train.csv").exists()

    sol_path = tmp_path / "sol.json"
    hs.save_solution(random_solution(), sol_path)
    chip_path = tmp_path / "chip.json"
    assert hs.main(common + ["chip", "-o", str(chip_path), "--fault-rate", "0.1",
                             "--faults-csv", str(tmp_path / "f.csv")]) == 0
    assert len((tmp_path / "f.csv").read_text().splitlines()) == 1 + 32 * 63
    prefix = tmp_path / "m"
    assert hs.main(common + ["map", str(chip_path), str(sol_path), "--beta", "2", "--prefix", str(prefix)]) == 0
    capsys.readouterr()
    assert hs.main(common + ["infer", "--prefix", str(prefix), str(sol_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    data = hs.dataset_for(cfg)
    assert out == hs.software_accuracy(random_solution(), data)

    net_path = tmp_path / "net.json"
    hs.save_network(nn.init_network(0), net_path)
    assert hs.main(common + ["quantize", str(net_path), "-o", str(tmp_path / "q.json")]) == 0
    assert hs.load_solution(tmp_path / "q.json").source_accuracy


def test_cli_exit_codes(tmp_path):
    out = ["--out", str(tmp_path)]
    # sweeps need a trained solution
    assert hs.main(out + ["sweep-defects"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert hs.main(["--config", str(bad), "report"]) == 2
    assert hs.main(out + ["report"]) == 1  # nothing to report on yet
    with pytest.raises(SystemExit) as exc:
        hs.main(out + ["no-such-command"])
    assert exc.value.code == 2


def test_cli_map_failure_exit_code(tmp_path):
    chip = cs.new_chip(cs.NoiseConfig.ideal(), ideal=True)
    cs.inject_faults(chip, 0.45, cs.Fault.STUCK_HIGH, seed=0)
    cs.save_chip(chip, tmp_path / "chip.json")
    hs.save_solution(random_solution(), tmp_path / "sol.json")
    args = ["--out", str(tmp_path), "map", str(tmp_path / "chip.json"), str(tmp_path / "sol.json"),
            "--prefix", str(tmp_path / "m")]
    assert hs.main(args) == 1
    assert hs.main(["--out", str(tmp_path), "infer", "--prefix", str(tmp_path / "m"), str(tmp_path / "sol.json")]) == 2
    assert hs.main(["--out", str(tmp_path), "infer", "--force", "--prefix", str(tmp_path / "m"),
                    str(tmp_path / "sol.json")]) == 0
