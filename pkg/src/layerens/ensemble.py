"""Layer ensemble averaging on a defective chip.

A ternary layer ``T`` (fan_in x fan_out) becomes two conductance blocks,
``G_pos`` and ``G_neg`` of shape (fan_out rows x fan_in cols). Each block is
written to the chip several times (``alpha`` copies) so that every output row
has at least ``beta`` copies free of faulted devices. At inference the
currents of exactly ``beta`` clean copies are averaged per output and the
difference ``I_pos - I_neg`` is decoded back to the software value.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chipsim import ConductanceLevels, Region, SimChip, kernel_vmm, program_block, read_conductance_map
from .neuralnet import TernarySolution, argmax_lowest, softmax


class Polarity(str, enum.Enum):
    POS = "pos"
    NEG = "neg"


POLARITIES = (Polarity.POS, Polarity.NEG)


class MappingError(RuntimeError):
    """Raised when a layer cannot be planned or an incomplete mapping is used."""


@dataclass(frozen=True)
class Placement(Region):
    polarity: Polarity = Polarity.POS
    copy_index: int = 0

    def to_dict(self) -> dict:
        return {
            "kernel_id": self.kernel_id,
            "row_offset": self.row_offset,
            "col_offset": self.col_offset,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "polarity": self.polarity.value,
            "copy_index": self.copy_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Placement":
        return cls(
            d["kernel_id"], d["row_offset"], d["col_offset"], d["n_rows"], d["n_cols"],
            Polarity(d["polarity"]), d["copy_index"],
        )


@dataclass
class EnsembleMapping:
    layer_id: int
    beta: int
    n_rows: int
    n_cols: int
    placements: dict[Polarity, list[Placement]]
    clean_mask: dict[Polarity, np.ndarray]
    targets: dict[Polarity, np.ndarray] | None = None

    def alpha(self, pol: Polarity) -> int:
        return len(self.placements[pol])

    def clean_counts(self, pol: Polarity) -> np.ndarray:
        return self.clean_mask[pol].sum(axis=0).astype(int)

    @property
    def success(self) -> bool:
        return all((self.clean_counts(p) >= self.beta).all() for p in POLARITIES)

    @property
    def n_devices(self) -> int:
        return sum(p.n_rows * p.n_cols for pol in POLARITIES for p in self.placements[pol])

    def all_placements(self) -> list[Placement]:
        return [p for pol in POLARITIES for p in self.placements[pol]]

    def to_dict(self) -> dict:
        doc = {
            "layer_id": self.layer_id,
            "beta": self.beta,
            "shape": [self.n_rows, self.n_cols],
            "success": self.success,
            "placements": {p.value: [pl.to_dict() for pl in self.placements[p]] for p in POLARITIES},
            "clean_mask": {p.value: self.clean_mask[p].astype(int).tolist() for p in POLARITIES},
            "clean_counts": {p.value: self.clean_counts(p).tolist() for p in POLARITIES},
        }
        if self.targets is not None:
            doc["targets"] = {p.value: self.targets[p].tolist() for p in POLARITIES}
        return doc

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleMapping":
        n_rows, n_cols = d["shape"]
        mapping = cls(
            layer_id=d["layer_id"],
            beta=d["beta"],
            n_rows=n_rows,
            n_cols=n_cols,
            placements={p: [Placement.from_dict(x) for x in d["placements"][p.value]] for p in POLARITIES},
            clean_mask={
                p: np.asarray(d["clean_mask"][p.value], dtype=bool).reshape(-1, n_rows) for p in POLARITIES
            },
        )
        if "targets" in d:
            mapping.targets = {p: np.asarray(d["targets"][p.value], dtype=float) for p in POLARITIES}
        return mapping


@dataclass(frozen=True)
class CalibrationInfo:
    g_diff_mean: float
    g_norm: float = 1.0

    def __post_init__(self):
        if not self.g_diff_mean > 0:
            raise ValueError("g_diff_mean must be positive")
        if not self.g_norm > 0:
            raise ValueError("g_norm must be positive")


# --------------------------------------------------------------------------
# encoding


def encode_differential(ternary, levels: ConductanceLevels | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Target blocks ``(G_pos, G_neg)`` with outputs on rows.

    +1 -> (G_on, G_off), 0 -> (G_on, G_on), -1 -> (G_off, G_on).
    """
    levels = levels or ConductanceLevels()
    t = np.asarray(ternary)
    if not np.isin(t, (-1, 0, 1)).all():
        raise ValueError("encode_differential needs entries in {-1, 0, +1}")
    t = t.T
    g_on, g_off = levels.g_on, levels.g_off
    g_pos = np.where(t < 0, g_off, g_on).astype(float)
    g_neg = np.where(t > 0, g_off, g_on).astype(float)
    return g_pos, g_neg


# --------------------------------------------------------------------------
# planning


def _occupancy(shape, avoid: Iterable[Region]) -> np.ndarray:
    occ = np.zeros(shape, dtype=bool)
    for r in avoid:
        occ[r.index()] = True
    return occ


def _window_sum(a: np.ndarray, n_rows: int, n_cols: int) -> np.ndarray:
    """Sum of every (n_rows x n_cols) window per kernel, shape (K, R-n+1, C-m+1)."""
    s = np.zeros((a.shape[0], a.shape[1] + 1, a.shape[2] + 1), dtype=np.int64)
    s[:, 1:, 1:] = a.cumsum(axis=1).cumsum(axis=2)
    return (
        s[:, n_rows:, n_cols:] - s[:, :-n_rows, n_cols:] - s[:, n_rows:, :-n_cols] + s[:, :-n_rows, :-n_cols]
    )


def candidate_clean_rows(fault_bitmap: np.ndarray, n_rows: int, n_cols: int) -> np.ndarray:
    """``clean[k, r, c, j]``: row ``j`` of a block placed at (k, r, c) has no faulted device."""
    seg = _window_sum(fault_bitmap.astype(np.int64), 1, n_cols) == 0  # (K, R, C-m+1)
    n_pos_r = fault_bitmap.shape[1] - n_rows + 1
    return np.stack([seg[:, j:j + n_pos_r, :] for j in range(n_rows)], axis=-1)


def find_layer_ensemble(fault_bitmap, shape: tuple[int, int], beta: int = 1,
                        avoid: Iterable[Region] = (), layer_id: int = 0) -> EnsembleMapping:
    """Greedy multi-cover placement of a layer's G_pos and G_neg blocks.

    ``shape`` is the conductance block shape (outputs, inputs). Each round
    scores every free (kernel, row, col, polarity) candidate by how many
    outputs of that polarity would gain a clean copy while still short of
    ``beta``, and commits the best one; ties go to the lowest kernel, row,
    column, then POS before NEG. Planning stops when every output has
    ``beta`` clean copies in both polarities, or when no candidate helps (the
    returned mapping then has ``success == False``).
    """
    fault_bitmap = np.asarray(fault_bitmap, dtype=bool)
    n_rows, n_cols = shape
    k_, r_, c_ = fault_bitmap.shape
    if beta < 1:
        raise ValueError("beta must be >= 1")
    if not (0 < n_rows <= r_ and 0 < n_cols <= c_):
        raise MappingError(f"layer block {shape} does not fit a {r_}x{c_} kernel")

    clean = candidate_clean_rows(fault_bitmap, n_rows, n_cols)
    grid = clean.shape[:3]
    clean_flat = clean.reshape(-1, n_rows)
    occ = _occupancy(fault_bitmap.shape, avoid)
    counts = {p: np.zeros(n_rows, dtype=int) for p in POLARITIES}
    placements: dict[Polarity, list[Placement]] = {p: [] for p in POLARITIES}
    masks: dict[Polarity, list[np.ndarray]] = {p: [] for p in POLARITIES}

    while not all((counts[p] >= beta).all() for p in POLARITIES):
        free = (_window_sum(occ.astype(np.int64), n_rows, n_cols) == 0).reshape(-1)
        scores = np.stack(
            [(clean_flat & (counts[p] < beta)).sum(axis=1) for p in POLARITIES], axis=1
        )
        scores[~free] = 0
        best = int(np.argmax(scores))  # C order: kernel, row, col, polarity
        cand, pol_i = divmod(best, 2)
        if scores[cand, pol_i] <= 0:
            break
        pol = POLARITIES[pol_i]
        k, r, c = np.unravel_index(cand, grid)
        pl = Placement(int(k), int(r), int(c), n_rows, n_cols, pol, len(placements[pol]))
        placements[pol].append(pl)
        masks[pol].append(clean_flat[cand].copy())
        counts[pol] += clean_flat[cand]
        occ[pl.index()] = True

    return EnsembleMapping(
        layer_id=layer_id,
        beta=beta,
        n_rows=n_rows,
        n_cols=n_cols,
        placements=placements,
        clean_mask={p: np.array(masks[p], dtype=bool).reshape(-1, n_rows) for p in POLARITIES},
    )


# --------------------------------------------------------------------------
# writing and calibration


@dataclass
class WriteReport:
    demoted: list[tuple[str, int, int]] = field(default_factory=list)  # (polarity, copy, output)
    device_failures: int = 0
    devices_written: int = 0
    beta_ok: bool = True


def write_ensemble(chip: SimChip, mapping: EnsembleMapping, ternary, margin: float = 16.66,
                   max_iters: int = 64) -> WriteReport:
    """Program every placement and demote row copies holding a failed device."""
    g_pos, g_neg = encode_differential(ternary, chip.levels)
    if g_pos.shape != (mapping.n_rows, mapping.n_cols):
        raise MappingError(
            f"layer {mapping.layer_id}: weights give blocks {g_pos.shape}, mapping expects "
            f"{(mapping.n_rows, mapping.n_cols)}"
        )
    targets = {Polarity.POS: g_pos, Polarity.NEG: g_neg}
    report = WriteReport()
    for pol in POLARITIES:
        for pl in mapping.placements[pol]:
            res = program_block(chip, pl, targets[pol], margin, max_iters)
            report.devices_written += res.success.size
            report.device_failures += int((~res.success).sum())
            row_ok = res.success.all(axis=1)
            for j in np.nonzero(mapping.clean_mask[pol][pl.copy_index] & ~row_ok)[0]:
                report.demoted.append((pol.value, pl.copy_index, int(j)))
            mapping.clean_mask[pol][pl.copy_index] &= row_ok
    mapping.targets = targets
    report.beta_ok = mapping.success
    return report


def measure_g_diff(chip: SimChip, mapping: EnsembleMapping) -> float:
    """Mean read-back G of devices targeted at G_on minus those at G_off, over clean rows."""
    if mapping.targets is None:
        raise MappingError("mapping has not been written")
    on, off = [], []
    for pol in POLARITIES:
        tgt = mapping.targets[pol]
        for pl in mapping.placements[pol]:
            rows = mapping.clean_mask[pol][pl.copy_index]
            if not rows.any():
                continue
            g = read_conductance_map(chip, pl)[rows]
            t = tgt[rows]
            on.append(g[t == chip.levels.g_on])
            off.append(g[t == chip.levels.g_off])
    on = np.concatenate(on) if on else np.empty(0)
    off = np.concatenate(off) if off else np.empty(0)
    if on.size == 0 or off.size == 0:
        raise MappingError(f"layer {mapping.layer_id}: no clean devices at both G_on and G_off")
    return float(on.mean() - off.mean())


# --------------------------------------------------------------------------
# inference


def contributing_copies(mapping: EnsembleMapping, pol: Polarity, force: bool = False) -> list[list[int]]:
    """Copy indices averaged for each output.

    Normally the first ``beta`` clean copies. With ``force`` an output short
    of ``beta`` uses whatever clean copies exist, or copy 0 if none do.
    """
    mask = mapping.clean_mask[pol]
    out = []
    for j in range(mapping.n_rows):
        clean = np.nonzero(mask[:, j])[0]
        if len(clean) >= mapping.beta:
            out.append(clean[: mapping.beta].tolist())
        elif not force:
            raise MappingError(
                f"layer {mapping.layer_id} {pol.value} output {j}: {len(clean)} clean copies < beta={mapping.beta}"
            )
        elif len(clean):
            out.append(clean.tolist())
        elif mapping.alpha(pol):
            out.append([0])
        else:
            raise MappingError(f"layer {mapping.layer_id} {pol.value}: no placement at all")
    return out


def ensemble_vmm(chip: SimChip, mapping: EnsembleMapping, inputs, force: bool = False,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Masked, averaged row currents ``(I_pos, I_neg)`` for inputs in [-1, 1].

    ``inputs`` is a fan_in vector or a (B, fan_in) batch; voltages
    ``v_read * x`` drive the placement's columns, all other columns sit at 0 V.
    """
    x = np.asarray(inputs, dtype=float)
    if x.shape[-1] != mapping.n_cols:
        raise ValueError(f"expected {mapping.n_cols} inputs")
    if (np.abs(x) > 1 + 1e-12).any():
        raise ValueError("inputs must be normalised to [-1, 1]")
    if not force and not mapping.success:
        raise MappingError(f"layer {mapping.layer_id}: mapping unsuccessful (fewer than beta clean copies)")
    batch = x.reshape(-1, mapping.n_cols)
    n_cols_kernel = chip.geometry.cols_per_kernel
    out = []
    for pol in POLARITIES:
        use = contributing_copies(mapping, pol, force)
        needed = sorted({c for cs in use for c in cs})
        currents = {}
        for c in needed:
            pl = mapping.placements[pol][c]
            v = np.zeros((len(batch), n_cols_kernel))
            v[:, pl.cols] = chip.levels.v_read * batch
            currents[c] = kernel_vmm(chip, pl.kernel_id, v, rng=rng)[:, pl.rows]
        avg = np.empty((len(batch), mapping.n_rows))
        for j, cs in enumerate(use):
            avg[:, j] = sum(currents[c][:, j] for c in cs) / len(cs)
        out.append(avg.reshape(x.shape[:-1] + (mapping.n_rows,)))
    return out[0], out[1]


def decode_output(i_pos, i_neg, calib: CalibrationInfo, v_read: float = 0.3, scale: float = 1.0,
                  input_scale: float = 1.0) -> np.ndarray:
    """``(I_pos - I_neg) / (g_norm * g_diff * v_read)``, then software and input rescaling."""
    i_pos = np.asarray(i_pos, dtype=float)
    i_neg = np.asarray(i_neg, dtype=float)
    if i_pos.shape != i_neg.shape:
        raise ValueError("current vectors differ in shape")
    if not (np.isfinite(i_pos).all() and np.isfinite(i_neg).all()):
        raise ValueError("non-finite currents")
    return (i_pos - i_neg) / (calib.g_norm * calib.g_diff_mean * v_read) * scale * input_scale


@dataclass
class EnsembleNetwork:
    solution: TernarySolution
    mappings: list[EnsembleMapping]
    calibrations: list[CalibrationInfo]
    v_read: float = 0.3
    input_scale: float = 2.0  # features in [0, 2] are halved before driving layer 1

    def __post_init__(self):
        for t, m in zip(self.solution.ternary_weights, self.mappings):
            if (m.n_rows, m.n_cols) != (t.shape[1], t.shape[0]):
                raise ValueError(f"layer {m.layer_id} mapping does not match weight shape {t.shape}")

    @property
    def success(self) -> bool:
        return all(m.success for m in self.mappings)

    def with_g_norm(self, g_norm: float) -> "EnsembleNetwork":
        cals = [CalibrationInfo(c.g_diff_mean, g_norm) for c in self.calibrations]
        return EnsembleNetwork(self.solution, self.mappings, cals, self.v_read, self.input_scale)


def ensemble_forward(chip: SimChip, net: EnsembleNetwork, features, force: bool = False,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Hardware forward pass: per layer ensemble VMM, decode, then activation in software."""
    a = np.asarray(features, dtype=float) / net.input_scale
    decoded = []
    n_layers = len(net.mappings)
    for l, (m, cal, s) in enumerate(zip(net.mappings, net.calibrations, net.solution.layer_scales)):
        i_pos, i_neg = ensemble_vmm(chip, m, a, force=force, rng=rng)
        z = decode_output(i_pos, i_neg, cal, net.v_read, s, net.input_scale if l == 0 else 1.0)
        decoded.append(z)
        a = np.tanh(z) if l < n_layers - 1 else softmax(z)
    return a, decoded


def ensemble_predict(chip: SimChip, net: EnsembleNetwork, features, force: bool = False,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    p, _ = ensemble_forward(chip, net, features, force, rng)
    return argmax_lowest(p)


def plan_network(fault_bitmap, solution: TernarySolution, beta: int = 1,
                 avoid: Iterable[Region] = (), order: Sequence[int] | None = None) -> list[EnsembleMapping]:
    """Plan all layers on one chip, each avoiding the blocks already taken.

    ``order`` is the planning order of layer indices; by default the largest
    block goes first since it is the hardest to fit.
    """
    shapes = [(t.shape[1], t.shape[0]) for t in solution.ternary_weights]
    if order is None:
        order = sorted(range(len(shapes)), key=lambda i: (-shapes[i][0] * shapes[i][1], i))
    taken = list(avoid)
    mappings: list[EnsembleMapping | None] = [None] * len(shapes)
    for i in order:
        m = find_layer_ensemble(fault_bitmap, shapes[i], beta, taken, layer_id=i)
        taken.extend(m.all_placements())
        mappings[i] = m
    return mappings


def build_ensemble_network(chip: SimChip, solution: TernarySolution, beta: int = 1, g_norm: float = 1.0,
                           margin: float = 16.66, max_iters: int = 64,
                           fault_bitmap=None) -> tuple[EnsembleNetwork, list[WriteReport]]:
    """Plan, write and calibrate every layer of ``solution`` on ``chip``.

    Planning uses ``fault_bitmap`` (default: the chip's true fault map).
    Unsuccessful layers are still written so degraded inference can run;
    their calibration falls back to the nominal ``G_on - G_off``.
    """
    bitmap = chip.fault_bitmap if fault_bitmap is None else fault_bitmap
    mappings = plan_network(bitmap, solution, beta)
    reports, cals = [], []
    nominal = chip.levels.g_on - chip.levels.g_off
    for m, t in zip(mappings, solution.ternary_weights):
        reports.append(write_ensemble(chip, m, t, margin, max_iters))
        try:
            g_diff = measure_g_diff(chip, m)
        except MappingError:
            g_diff = nominal
        cals.append(CalibrationInfo(g_diff, g_norm))
    return EnsembleNetwork(solution, mappings, cals, chip.levels.v_read), reports


def ensemble_stats(mappings: Sequence[EnsembleMapping]) -> dict:
    per_layer = [
        {
            "layer_id": m.layer_id,
            "alpha_pos": m.alpha(Polarity.POS),
            "alpha_neg": m.alpha(Polarity.NEG),
            "devices": m.n_devices,
            "success": m.success,
        }
        for m in mappings
    ]
    return {"layers": per_layer, "total_devices": sum(x["devices"] for x in per_layer)}


# --------------------------------------------------------------------------
# persistence


def save_mappings(mappings: Sequence[EnsembleMapping], path) -> None:
    Path(path).write_text(json.dumps({"mappings": [m.to_dict() for m in mappings]}, indent=1))


def load_mappings(path) -> list[EnsembleMapping]:
    doc = json.loads(Path(path).read_text())
    return [EnsembleMapping.from_dict(d) for d in doc["mappings"]]


def save_calibration(calibrations: Sequence[CalibrationInfo], path) -> None:
    doc = {"layers": [{"layer_id": i, "g_diff_mean": c.g_diff_mean, "g_norm": c.g_norm}
                      for i, c in enumerate(calibrations)]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_calibration(path) -> list[CalibrationInfo]:
    doc = json.loads(Path(path).read_text())
    return [CalibrationInfo(d["g_diff_mean"], d["g_norm"]) for d in doc["layers"]]
