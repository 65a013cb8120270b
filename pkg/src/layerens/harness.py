"""Experiment orchestration: training, sweeps, VMM validation and reporting.

Every sweep writes a raw CSV under ``<out>/sweeps``; ``cmd_report`` turns those
into one plot-ready table per figure analog plus a pass/fail summary.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import metadata
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import chipsim as cs
from . import ensemble as en
from . import neuralnet as nn
from .taskgen import MultiTaskDataset, load_dataset_csv, make_multitask_dataset, save_dataset_csv

log = logging.getLogger("layerens")

EXIT_OK, EXIT_ACCEPTANCE, EXIT_INVALID = 0, 1, 2


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class ExperimentConfig:
    seed: int = 42
    n_train: int = 5000
    n_test: int = 1000
    n_networks: int = 20
    lr: float = 0.05
    batch_size: int = 32
    ewc_lambda: float = 3.0
    epochs_per_task: int = 100
    noise_preset: str = "hardware-like"
    fault_rates: list[float] = field(default_factory=lambda: [round(0.05 * i, 2) for i in range(9)])
    betas: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    g_norms: list[float] = field(default_factory=lambda: [float(g) for g in 2.0 ** np.linspace(-2, 2, 9)])
    beta_sweep_fault_rate: float = 0.1
    gnorm_beta: int = 3
    repeats: int = 20
    vmm_vectors: int = 100
    vmm_measurements: int = 20
    vmm_map_reads: int = 1000
    margin: float = 16.66
    max_iters: int = 64
    out: str = "results"
    threads: int = 1

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        for name in ("fault_rates", "betas", "g_norms"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        if self.noise_preset not in cs.NOISE_PRESETS:
            raise ValueError(f"unknown noise preset {self.noise_preset!r}")
        if any(not 0 <= r <= 1 for r in self.fault_rates):
            raise ValueError("fault rates must lie in [0, 1]")
        if any(b < 1 for b in self.betas) or any(g <= 0 for g in self.g_norms):
            raise ValueError("betas must be >= 1 and g_norms positive")
        if self.threads < 1 or self.n_networks < 1:
            raise ValueError("threads and n_networks must be at least 1")

    @property
    def hyperparameters(self) -> nn.Hyperparameters:
        return nn.Hyperparameters(self.lr, self.batch_size, self.ewc_lambda, self.epochs_per_task)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        # out and threads do not change results
        doc = {k: v for k, v in self.to_dict().items() if k not in ("out", "threads")}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValueError("config must be a JSON object")
        return cls.from_dict(doc)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# --------------------------------------------------------------------------
# persistence of networks and solutions


def save_network(net: nn.Network, path) -> None:
    Path(path).write_text(json.dumps({"weights": [w.tolist() for w in net.weights]}))


def load_network(path) -> nn.Network:
    doc = json.loads(Path(path).read_text())
    return nn.Network([np.asarray(w, dtype=float) for w in doc["weights"]])


def solution_to_dict(sol: nn.TernarySolution) -> dict:
    return {
        "ternary_weights": [t.tolist() for t in sol.ternary_weights],
        "layer_scales": list(map(float, sol.layer_scales)),
        "source_accuracy": sol.source_accuracy,
    }


def save_solution(sol: nn.TernarySolution, path) -> None:
    Path(path).write_text(json.dumps(solution_to_dict(sol), indent=1))


def load_solution(path) -> nn.TernarySolution:
    try:
        doc = json.loads(Path(path).read_text())
        return nn.TernarySolution(
            [np.asarray(t, dtype=np.int64) for t in doc["ternary_weights"]],
            [float(s) for s in doc["layer_scales"]],
            dict(doc.get("source_accuracy", {})),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed solution file {path}: {exc}") from exc


def save_history_csv(hist: nn.TrainHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "method", "task1_acc", "task2_acc", "loss"])
        w.writeheader()
        w.writerows(hist.rows())


def write_rows(path, rows: Sequence[dict], cfg: ExperimentConfig) -> Path:
    """CSV with provenance columns appended to every row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    prov = {"config_hash": cfg.config_hash(), "version": tool_version()}
    with open(path, "w", newline="") as fh:
        if not rows:
            fh.write("")
            return path
        w = csv.DictWriter(fh, fieldnames=[*rows[0], *prov])
        w.writeheader()
        for r in rows:
            w.writerow({**r, **prov})
    return path


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainOutcome:
    histories: dict[str, list[nn.TrainHistory]]
    networks: dict[str, list[nn.Network]]
    ternary: list[nn.TernarySolution]
    baselines: dict[str, float]
    selected_index: int | None
    solution: nn.TernarySolution | None

    def final_means(self, method: str) -> dict[str, float]:
        h = self.histories[method]
        return {
            "task1": float(np.mean([x.task1_acc[-1] for x in h])),
            "task2": float(np.mean([x.task2_acc[-1] for x in h])),
        }


def dataset_for(cfg: ExperimentConfig) -> MultiTaskDataset:
    data_dir = cfg.out_dir / "data"
    if (data_dir / "train.csv").exists() and (data_dir / "test.csv").exists():
        data = load_dataset_csv(data_dir, seed=cfg.seed)
        if len(data.train_task1) == cfg.n_train and len(data.test_task1) == cfg.n_test:
            return data
    return make_multitask_dataset(cfg.n_train, cfg.n_test, cfg.seed)


def cmd_train(cfg: ExperimentConfig, data: MultiTaskDataset | None = None, write: bool = True) -> TrainOutcome:
    """Train SGD and EWC populations, quantize the EWC networks, select one."""
    data = data or dataset_for(cfg)
    seeds = list(range(cfg.n_networks))
    hp = cfg.hyperparameters
    histories, networks = {}, {}
    for method in nn.METHODS:
        res = nn.train_population(seeds, data, method, hp)
        networks[method] = [r[0] for r in res]
        histories[method] = [r[1] for r in res]
    baselines = nn.linear_baselines(data)
    ternary = [nn.ternarize(net, data) for net in networks["EWC"]]
    try:
        idx = nn.select_solution(list(zip(networks["EWC"], ternary)), baselines)
        solution = ternary[idx]
    except nn.NoQualifyingSolution:
        idx, solution = None, None
    outcome = TrainOutcome(histories, networks, ternary, baselines, idx, solution)
    if write:
        _write_training(cfg, outcome)
    if solution is None:
        raise nn.NoQualifyingSolution("no quantized EWC network beats the linear baseline on both tasks")
    return outcome


def _write_training(cfg: ExperimentConfig, o: TrainOutcome) -> None:
    d = cfg.out_dir / "train"
    d.mkdir(parents=True, exist_ok=True)
    for method, hs in o.histories.items():
        for h, net in zip(hs, o.networks[method]):
            save_history_csv(h, d / f"history_{method}_seed{h.seed:02d}.csv")
            save_network(net, d / f"network_{method}_seed{h.seed:02d}.json")
    for seed, sol in enumerate(o.ternary):
        save_solution(sol, d / f"ternary_EWC_seed{seed:02d}.json")
    (d / "baseline.json").write_text(json.dumps(o.baselines, indent=1))
    rows = []
    for method, hs in o.histories.items():
        for h in hs:
            for r in h.rows():
                rows.append({"seed": h.seed, **r})
    write_rows(cfg.out_dir / "sweeps" / "training.csv", rows, cfg)
    if o.solution is not None:
        save_solution(o.solution, d / "selected_solution.json")
        (d / "selected.json").write_text(json.dumps({
            "seed": o.selected_index,
            "accuracy": o.solution.source_accuracy,
            "hyperparameters": nn.hyperparameters_dict(cfg.hyperparameters),
        }, indent=1))


def load_selected(cfg: ExperimentConfig) -> tuple[nn.TernarySolution, dict[str, float]]:
    d = cfg.out_dir / "train"
    path = d / "selected_solution.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the train command first")
    return load_solution(path), json.loads((d / "baseline.json").read_text())


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    variable: str
    values: list
    records: list[dict]
    repeats: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = {}
        for r in self.records:
            counts[r[self.variable]] = counts.get(r[self.variable], 0) + 1
        if any(c % self.repeats for c in counts.values()):
            raise ValueError("record count does not match the repeat dimension")

    def column(self, value, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records if r[self.variable] == value], dtype=float)

    def summary(self, key: str = "acc_mean") -> list[dict]:
        out = []
        for v in self.values:
            col = self.column(v, key)
            out.append({self.variable: v, "mean": float(col.mean()), "std": float(col.std()), "n": len(col)})
        return out


def _run_repeats(cfg: ExperimentConfig, jobs: list[tuple], fn: Callable) -> list[dict]:
    """Run independent repeats, possibly concurrently; order of results is fixed."""
    if cfg.threads == 1:
        out = [fn(*j) for j in jobs]
    else:
        with ThreadPoolExecutor(cfg.threads) as pool:
            out = list(pool.map(lambda j: fn(*j), jobs))
    flat = []
    for o in out:
        flat.extend(o if isinstance(o, list) else [o])
    return flat


def _accuracies(chip, ens, data, force=False, rng=None) -> dict[str, float]:
    a1 = np.mean(en.ensemble_predict(chip, ens, data.test_task1.features, force, rng) == data.test_task1.labels)
    a2 = np.mean(en.ensemble_predict(chip, ens, data.test_task2.features, force, rng) == data.test_task2.labels)
    return {"acc_task1": float(a1), "acc_task2": float(a2), "acc_mean": float((a1 + a2) / 2)}


def _mapping_record(ens: en.EnsembleNetwork) -> dict:
    stats = en.ensemble_stats(ens.mappings)
    rec = {"success": int(ens.success), "total_devices": stats["total_devices"]}
    for layer in stats["layers"]:
        i = layer["layer_id"]
        rec[f"alpha_pos_l{i}"] = layer["alpha_pos"]
        rec[f"alpha_neg_l{i}"] = layer["alpha_neg"]
        rec[f"success_l{i}"] = int(layer["success"])
    return rec


def software_accuracy(sol: nn.TernarySolution, data: MultiTaskDataset) -> dict[str, float]:
    a1, a2 = nn.evaluate(sol, data.test_task1), nn.evaluate(sol, data.test_task2)
    return {"acc_task1": a1, "acc_task2": a2, "acc_mean": (a1 + a2) / 2}


def cmd_defect_sweep(cfg: ExperimentConfig, sol: nn.TernarySolution, data: MultiTaskDataset,
                     write: bool = True) -> SweepResult:
    """Stuck-high faults on ideal devices, beta = 1; failed mappings run in forced mode."""

    def one(i_rate, rate, rep):
        chip = cs.new_chip(cs.NoiseConfig.ideal(), ideal=True)
        cs.inject_faults(chip, rate, cs.Fault.STUCK_HIGH, seed=derive_seed(cfg.seed, 5, i_rate, rep))
        ens, _ = en.build_ensemble_network(chip, sol, 1, 1.0, cfg.margin, cfg.max_iters)
        rec = {"rate": rate, "repeat": rep, **_mapping_record(ens)}
        rec["forced"] = int(not ens.success)
        rec.update(_accuracies(chip, ens, data, force=not ens.success))
        return rec

    jobs = [(i, r, k) for i, r in enumerate(cfg.fault_rates) for k in range(cfg.repeats)]
    res = SweepResult("rate", list(cfg.fault_rates), _run_repeats(cfg, jobs, one), cfg.repeats,
                      {"software": software_accuracy(sol, data)})
    if write:
        write_rows(cfg.out_dir / "sweeps" / "defects.csv", res.records, cfg)
    return res


def _noisy_chip(cfg: ExperimentConfig, noise_seed: int, fault_seed: int, rate: float) -> cs.SimChip:
    chip = cs.new_chip(cs.NOISE_PRESETS[cfg.noise_preset](seed=noise_seed))
    cs.inject_faults(chip, rate, cs.Fault.STUCK_HIGH, seed=fault_seed)
    return chip


def cmd_beta_sweep(cfg: ExperimentConfig, sol: nn.TernarySolution, data: MultiTaskDataset,
                   write: bool = True) -> SweepResult:
    """Ensemble size sweep on a noisy chip sharing one fault map across repeats."""
    fault_seed = derive_seed(cfg.seed, 6)

    def one(beta, rep):
        chip = _noisy_chip(cfg, derive_seed(cfg.seed, 6, beta, rep), fault_seed, cfg.beta_sweep_fault_rate)
        ens, _ = en.build_ensemble_network(chip, sol, beta, 1.0, cfg.margin, cfg.max_iters)
        rec = {"beta": beta, "repeat": rep, **_mapping_record(ens), "forced": int(not ens.success)}
        rec.update(_accuracies(chip, ens, data, force=not ens.success))
        return rec

    jobs = [(b, k) for b in cfg.betas for k in range(cfg.repeats)]
    records = _run_repeats(cfg, jobs, one)

    # reference: perfect devices, no faults, a single copy
    ideal = cs.new_chip(cs.NoiseConfig.ideal(), ideal=True)
    ens, _ = en.build_ensemble_network(ideal, sol, 1)
    extra = {"software": software_accuracy(sol, data), "ideal": _accuracies(ideal, ens, data)}
    res = SweepResult("beta", list(cfg.betas), records, cfg.repeats, extra)
    if write:
        write_rows(cfg.out_dir / "sweeps" / "beta.csv", records, cfg)
        write_rows(cfg.out_dir / "sweeps" / "beta_reference.csv",
                   [{"model": k, **v} for k, v in extra.items()], cfg)
    return res


def cmd_gnorm_sweep(cfg: ExperimentConfig, sol: nn.TernarySolution, data: MultiTaskDataset,
                    write: bool = True) -> SweepResult:
    """Decode-scale sweep for an ideal chip and a noisy faulted chip, both at ``gnorm_beta``."""
    fault_seed = derive_seed(cfg.seed, 7)

    def one(rep):
        out = []
        ideal = cs.new_chip(cs.NoiseConfig.ideal(), ideal=True)
        ens_i, _ = en.build_ensemble_network(ideal, sol, cfg.gnorm_beta)
        noisy = _noisy_chip(cfg, derive_seed(cfg.seed, 7, rep), fault_seed, cfg.beta_sweep_fault_rate)
        ens_n, _ = en.build_ensemble_network(noisy, sol, cfg.gnorm_beta, 1.0, cfg.margin, cfg.max_iters)
        for g in cfg.g_norms:
            for model, chip, ens in (("ideal", ideal, ens_i), ("noisy", noisy, ens_n)):
                e = ens.with_g_norm(g)
                rec = {"g_norm": g, "model": model, "repeat": rep, "success": int(e.success)}
                rec.update(_accuracies(chip, e, data, force=not e.success))
                out.append(rec)
        return out

    records = _run_repeats(cfg, [(k,) for k in range(cfg.repeats)], one)
    res = SweepResult("g_norm", list(cfg.g_norms), records, 2 * cfg.repeats,
                      {"software": software_accuracy(sol, data)})
    if write:
        write_rows(cfg.out_dir / "sweeps" / "gnorm.csv", records, cfg)
    return res


def model_summary(res: SweepResult, model: str, key: str = "acc_mean") -> np.ndarray:
    """Mean over repeats of ``key`` for one model of a g_norm sweep, in grid order."""
    return np.array([
        np.mean([r[key] for r in res.records if r["g_norm"] == g and r["model"] == model])
        for g in res.values
    ])


@dataclass
class VmmReport:
    theoretical: np.ndarray  # (vectors, outputs)
    measured: np.ndarray  # mean over repeated measurements
    slope: float
    intercept: float
    rmse: float
    r2: float
    max_rel_error: float

    def rows(self) -> list[dict]:
        return [
            {"vector": i, "output": j, "theoretical_uA": float(t), "measured_uA": float(m)}
            for i, (tv, mv) in enumerate(zip(self.theoretical, self.measured))
            for j, (t, m) in enumerate(zip(tv, mv))
        ]


def cmd_vmm_validate(cfg: ExperimentConfig, noise: cs.NoiseConfig | None = None, ideal: bool = False,
                     write: bool = True) -> VmmReport:
    """Random 4-level kernel, conductance map, then repeated random-voltage reads."""
    noise = noise or cs.NoiseConfig(seed=derive_seed(cfg.seed, 8))
    chip = cs.new_chip(noise, ideal=ideal)
    cs.random_levels_write(chip, 0, derive_seed(cfg.seed, 8, 1), cfg.margin, cfg.max_iters)
    region = cs.Region(0, 0, 0, chip.geometry.rows_per_kernel, chip.geometry.cols_per_kernel)
    reads = 1 if ideal else cfg.vmm_map_reads
    g_map = np.mean([cs.read_conductance_map(chip, region) for _ in range(reads)], axis=0)
    rng = np.random.default_rng(derive_seed(cfg.seed, 8, 2))
    v = rng.uniform(-chip.levels.v_read, chip.levels.v_read, (cfg.vmm_vectors, chip.geometry.cols_per_kernel))
    theo = v @ g_map.T
    reps = np.repeat(v[None], cfg.vmm_measurements, axis=0).reshape(-1, v.shape[1])
    meas = cs.kernel_vmm(chip, 0, reps).reshape(cfg.vmm_measurements, *theo.shape).mean(axis=0)
    slope, intercept = np.polyfit(theo.ravel(), meas.ravel(), 1)
    resid = meas - theo
    r2 = 1 - np.sum((meas - (slope * theo + intercept)) ** 2) / np.sum((meas - meas.mean()) ** 2)
    scale = np.abs(v) @ np.abs(g_map).T
    rep = VmmReport(theo, meas, float(slope), float(intercept), float(np.sqrt(np.mean(resid**2))), float(r2),
                    float(np.max(np.abs(resid) / scale)))
    if write:
        write_rows(cfg.out_dir / "sweeps" / "vmm.csv", rep.rows(), cfg)
        (cfg.out_dir / "sweeps" / "vmm_fit.json").write_text(json.dumps({
            "slope": rep.slope, "intercept": rep.intercept, "rmse": rep.rmse, "r2": rep.r2,
        }, indent=1))
    return rep


# --------------------------------------------------------------------------
# report


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std())


def _group(rows, *keys):
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    return groups


def non_decreasing_within(means, slack) -> bool:
    means = list(means)
    slack = list(slack) if np.iterable(slack) else [slack] * len(means)
    return all(b >= a - s for a, b, s in zip(means, means[1:], slack[1:]))


def count_inversions(means, tol: float) -> tuple[int, bool]:
    """Number of decreases along the sequence; the flag tells whether all are at most ``tol``."""
    drops = [a - b for a, b in zip(means, means[1:]) if b < a]
    return len(drops), all(d <= tol for d in drops)


def cmd_report(cfg: ExperimentConfig) -> tuple[list[Path], list[str], bool]:
    """Figure tables and an acceptance summary from whatever sweeps exist.

    Returns the written files, the summary lines and whether every present
    section passed.
    """
    sweeps, rep = cfg.out_dir / "sweeps", cfg.out_dir / "report"
    rep.mkdir(parents=True, exist_ok=True)
    written, lines, ok = [], [], True

    def check(name, passed, detail=""):
        nonlocal ok
        ok &= bool(passed)
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip())

    baseline = None
    bpath = cfg.out_dir / "train" / "baseline.json"
    if bpath.exists():
        baseline = json.loads(bpath.read_text())

    # fig1c: training curves
    if (sweeps / "training.csv").exists() and baseline:
        rows = read_rows(sweeps / "training.csv")
        table = []
        for (method, epoch), grp in sorted(_group(rows, "method", "epoch").items(), key=lambda x: (x[0][0], int(x[0][1]))):
            m1, s1 = _mean_std([g["task1_acc"] for g in grp])
            m2, s2 = _mean_std([g["task2_acc"] for g in grp])
            table.append({"method": method, "epoch": int(epoch), "task1_mean": m1, "task1_std": s1,
                          "task2_mean": m2, "task2_std": s2})
        written.append(write_rows(rep / "fig1c.csv", table, cfg))
        last = {t["method"]: t for t in table if t["epoch"] == max(x["epoch"] for x in table)}
        check("training: SGD forgets Task 1", last["SGD"]["task1_mean"] < baseline["task1"],
              f"{last['SGD']['task1_mean']:.3f} < {baseline['task1']:.3f}")
        check("training: EWC beats linear baseline",
              last["EWC"]["task1_mean"] > baseline["task1"] and last["EWC"]["task2_mean"] > baseline["task2"],
              f"{last['EWC']['task1_mean']:.3f}/{last['EWC']['task2_mean']:.3f}")
        sel = cfg.out_dir / "train" / "selected_solution.json"
        if sel.exists():
            acc = load_solution(sel).source_accuracy
            if {"task1", "task2"} <= set(acc):
                m = (acc["task1"] + acc["task2"]) / 2
                check("training: selected ternary solution >= 70 %", m >= 0.70, f"{m:.3f}")
            else:
                check("training: selected ternary solution >= 70 %", False, "accuracy not recorded")
        else:
            check("training: selected ternary solution exists", False)
    else:
        lines.append("MISSING  training (run train)")

    # fig4f: VMM fidelity
    if (sweeps / "vmm.csv").exists():
        rows = read_rows(sweeps / "vmm.csv")
        written.append(write_rows(rep / "fig4f.csv", [
            {k: r[k] for k in ("vector", "output", "theoretical_uA", "measured_uA")} for r in rows], cfg))
        fit = json.loads((sweeps / "vmm_fit.json").read_text())
        check("vmm: slope in [0.99, 1.01] and R^2 >= 0.999",
              0.99 <= fit["slope"] <= 1.01 and fit["r2"] >= 0.999, f"slope {fit['slope']:.4f} R^2 {fit['r2']:.5f}")
    else:
        lines.append("MISSING  vmm validation (run validate-vmm)")

    # fig5b-d: defect sweep
    if (sweeps / "defects.csv").exists():
        rows = read_rows(sweeps / "defects.csv")
        by_rate = sorted(_group(rows, "rate").items(), key=lambda x: float(x[0][0]))
        alpha_cols = sorted(k for k in rows[0] if k.startswith("alpha_"))
        t5b, t5c, t5d = [], [], []
        for (rate,), grp in by_rate:
            for col in alpha_cols:
                m, s = _mean_std([g[col] for g in grp])
                t5b.append({"rate": float(rate), "series": col, "mean": m, "std": s})
            m, s = _mean_std([g["total_devices"] for g in grp])
            t5c.append({"rate": float(rate), "total_devices_mean": m, "total_devices_std": s})
            m, s = _mean_std([g["acc_mean"] for g in grp])
            t5d.append({"rate": float(rate), "acc_mean": m, "acc_std": s,
                        "success_rate": float(np.mean([int(g["success"]) for g in grp]))})
        written += [write_rows(rep / "fig5b.csv", t5b, cfg), write_rows(rep / "fig5c.csv", t5c, cfg),
                    write_rows(rep / "fig5d.csv", t5d, cfg)]
        low = [t for t in t5d if t["rate"] <= 0.30 + 1e-9]
        check("defects: mapping always succeeds up to 30 %", all(t["success_rate"] == 1 for t in low))
        at35 = [t for t in t5d if abs(t["rate"] - 0.35) < 1e-9]
        if at35:
            check("defects: >= 90 % success at 35 %", at35[0]["success_rate"] >= 0.9, f"{at35[0]['success_rate']:.2f}")
        upto35 = [t for t in t5c if t["rate"] <= 0.35 + 1e-9]
        n_inv, small = count_inversions([t["total_devices_mean"] for t in upto35], 276.0)
        check("defects: device totals grow with fault rate", n_inv <= 1 and small, f"{n_inv} inversion(s)")
    else:
        lines.append("MISSING  defect sweep (run sweep-defects)")

    # fig6a: beta sweep
    if (sweeps / "beta.csv").exists():
        rows = read_rows(sweeps / "beta.csv")
        ref = {r["model"]: r for r in read_rows(sweeps / "beta_reference.csv")}
        table = []
        for (beta,), grp in sorted(_group(rows, "beta").items(), key=lambda x: int(x[0][0])):
            m, s = _mean_std([g["acc_mean"] for g in grp])
            table.append({"beta": int(beta), "acc_mean": m, "acc_std": s,
                          "ideal_acc_mean": float(ref["ideal"]["acc_mean"])})
        written.append(write_rows(rep / "fig6a.csv", table, cfg))
        check("beta: accuracy non-decreasing within one std",
              non_decreasing_within([t["acc_mean"] for t in table], [t["acc_std"] for t in table]))
        b3 = [t for t in table if t["beta"] == 3]
        sw = float(ref["software"]["acc_mean"])
        if b3:
            check("beta: beta=3 within 2 points of software", abs(b3[0]["acc_mean"] - sw) <= 0.02,
                  f"{b3[0]['acc_mean']:.3f} vs {sw:.3f}")
    else:
        lines.append("MISSING  beta sweep (run sweep-beta)")

    # fig6e: g_norm sweep
    if (sweeps / "gnorm.csv").exists():
        rows = read_rows(sweeps / "gnorm.csv")
        table = []
        for (g, model), grp in sorted(_group(rows, "g_norm", "model").items(), key=lambda x: (x[0][1], float(x[0][0]))):
            row = {"g_norm": float(g), "model": model}
            for key in ("acc_task1", "acc_task2", "acc_mean"):
                row[key], row[key + "_std"] = _mean_std([r[key] for r in grp])
            table.append(row)
        written.append(write_rows(rep / "fig6e.csv", table, cfg))
        ideal = [t for t in table if t["model"] == "ideal"]
        at1 = [t for t in ideal if abs(t["g_norm"] - 1) < 1e-12]
        if at1:
            best = max(t["acc_mean"] for t in ideal)
            check("gnorm: ideal accuracy maximal at 1", at1[0]["acc_mean"] >= best - 1e-12)
            if baseline:
                flags = [t["acc_task1"] > baseline["task1"] and t["acc_task2"] > baseline["task2"] for t in ideal]
                check("gnorm: both tasks above baseline around 1", flags[ideal.index(at1[0])])
        else:
            check("gnorm: grid contains 1", False)
    else:
        lines.append("MISSING  g_norm sweep (run sweep-gnorm)")

    header = [f"config {cfg.config_hash()}  version {tool_version()}"]
    (rep / "summary.txt").write_text("\n".join(header + lines) + "\n")
    written.append(rep / "summary.txt")
    complete = not any(l.startswith("MISSING") for l in lines)
    return written, lines, ok and complete


# --------------------------------------------------------------------------
# CLI


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layerens", description="Layer-ensemble mapping of a continual-learning MLP on a faulty memristor chip")
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=str, help="output directory (default: results)")
    p.add_argument("--threads", type=int, help="concurrent repeats in sweeps")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="write train.csv and test.csv")
    sub.add_parser("train", help="train SGD/EWC networks and select a ternary solution")

    q = sub.add_parser("quantize", help="ternarize a float network file")
    q.add_argument("network", type=Path)
    q.add_argument("-o", "--output", type=Path, required=True)

    c = sub.add_parser("chip", help="create a chip with injected faults")
    c.add_argument("-o", "--output", type=Path, required=True)
    c.add_argument("--fault-rate", type=float, default=0.0)
    c.add_argument("--fault-mode", choices=[f.name for f in cs.Fault if f != cs.Fault.WORKING], default="STUCK_HIGH")
    c.add_argument("--noise", choices=sorted(cs.NOISE_PRESETS), default="ideal")
    c.add_argument("--faults-csv", type=Path)

    m = sub.add_parser("map", help="plan, write and calibrate a solution on a chip")
    m.add_argument("chip", type=Path)
    m.add_argument("solution", type=Path)
    m.add_argument("--beta", type=int, default=1)
    m.add_argument("--prefix", type=Path, required=True, help="writes <prefix>.mapping.json, .calibration.json, .chip.json")

    i = sub.add_parser("infer", help="test-set accuracy of a mapped solution")
    i.add_argument("--prefix", type=Path, required=True)
    i.add_argument("solution", type=Path)
    i.add_argument("--g-norm", type=float, default=1.0)
    i.add_argument("--force", action="store_true", help="degraded inference when beta is not met")

    sub.add_parser("sweep-defects", help="fault-rate sweep on ideal devices")
    sub.add_parser("sweep-beta", help="ensemble-size sweep on a noisy chip")
    sub.add_parser("sweep-gnorm", help="decode-scale sweep")
    v = sub.add_parser("validate-vmm", help="crossbar VMM against the conductance map")
    v.add_argument("--ideal", action="store_true")
    sub.add_parser("report", help="figure tables and acceptance summary")
    return p


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "out", "threads") if getattr(args, k) is not None}
    return ExperimentConfig.from_dict({**cfg.to_dict(), **overrides}) if overrides else cfg


def _print_sweep(res: SweepResult) -> None:
    for row in res.summary():
        print(f"{res.variable}={row[res.variable]:<8g} acc {row['mean']:.4f} +/- {row['std']:.4f} (n={row['n']})")


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = config_from_args(args)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cmd = args.command

    if cmd == "gen-data":
        data = make_multitask_dataset(cfg.n_train, cfg.n_test, cfg.seed)
        for path in save_dataset_csv(data, cfg.out_dir / "data"):
            print(path)
    elif cmd == "train":
        try:
            o = cmd_train(cfg)
        except nn.NoQualifyingSolution as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ACCEPTANCE
        for method in nn.METHODS:
            fm = o.final_means(method)
            print(f"{method}: task1 {fm['task1']:.4f} task2 {fm['task2']:.4f}")
        print(f"linear baseline: task1 {o.baselines['task1']:.4f} task2 {o.baselines['task2']:.4f}")
        acc = o.solution.source_accuracy
        print(f"selected EWC seed {o.selected_index}: ternary task1 {acc['task1']:.4f} task2 {acc['task2']:.4f}")
    elif cmd == "quantize":
        sol = nn.ternarize(load_network(args.network), dataset_for(cfg))
        save_solution(sol, args.output)
        print(json.dumps(sol.source_accuracy))
    elif cmd == "chip":
        chip = cs.new_chip(cs.NOISE_PRESETS[args.noise](seed=cfg.seed), ideal=args.noise == "ideal")
        cs.inject_faults(chip, args.fault_rate, cs.Fault[args.fault_mode], seed=cfg.seed)
        cs.save_chip(chip, args.output)
        if args.faults_csv:
            cs.save_fault_csv(chip, args.faults_csv)
        print(f"{int(chip.fault_bitmap.sum())} faulty devices")
    elif cmd == "map":
        chip, sol = cs.load_chip(args.chip), load_solution(args.solution)
        ens, reports = en.build_ensemble_network(chip, sol, args.beta, 1.0, cfg.margin, cfg.max_iters)
        prefix = str(args.prefix)
        en.save_mappings(ens.mappings, prefix + ".mapping.json")
        en.save_calibration(ens.calibrations, prefix + ".calibration.json")
        cs.save_chip(chip, prefix + ".chip.json")
        stats = en.ensemble_stats(ens.mappings)
        for layer in stats["layers"]:
            print(json.dumps(layer))
        print(f"total devices {stats['total_devices']}")
        if not ens.success:
            print("mapping failed: beta not met for every output", file=sys.stderr)
            return EXIT_ACCEPTANCE
    elif cmd == "infer":
        prefix = str(args.prefix)
        chip = cs.load_chip(prefix + ".chip.json")
        sol = load_solution(args.solution)
        ens = en.EnsembleNetwork(sol, en.load_mappings(prefix + ".mapping.json"),
                                 en.load_calibration(prefix + ".calibration.json"), chip.levels.v_read)
        ens = ens.with_g_norm(args.g_norm)
        if not ens.success and not args.force:
            print("mapping does not meet beta; pass --force for degraded inference", file=sys.stderr)
            return EXIT_INVALID
        print(json.dumps(_accuracies(chip, ens, dataset_for(cfg), force=args.force)))
    elif cmd in ("sweep-defects", "sweep-beta", "sweep-gnorm"):
        sol, _ = load_selected(cfg)
        fn = {"sweep-defects": cmd_defect_sweep, "sweep-beta": cmd_beta_sweep, "sweep-gnorm": cmd_gnorm_sweep}[cmd]
        _print_sweep(fn(cfg, sol, dataset_for(cfg)))
    elif cmd == "validate-vmm":
        r = cmd_vmm_validate(cfg, ideal=args.ideal)
        print(f"slope {r.slope:.5f} intercept {r.intercept:.4f} uA rmse {r.rmse:.4f} uA R^2 {r.r2:.6f}")
    elif cmd == "report":
        _, lines, ok = cmd_report(cfg)
        print("\n".join(lines))
        return EXIT_OK if ok else EXIT_ACCEPTANCE
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except (ValueError, FileNotFoundError, KeyError, en.MappingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
