"""Simulated 20,000-device memristive chip: 32 kernels of 25x25 devices.

Units throughout: conductance in uS, voltage in V, current in uA
(uS * V = uA). Inputs are applied on kernel columns and currents are
summed on rows, ``I[r] = sum_c G[r, c] * V[c]``.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class Fault(enum.IntEnum):
    WORKING = 0
    STUCK_HIGH = 1
    STUCK_LOW = 2
    SHORTED = 3


@dataclass(frozen=True)
class ChipGeometry:
    n_kernels: int = 32
    rows_per_kernel: int = 25
    cols_per_kernel: int = 25

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_kernels, self.rows_per_kernel, self.cols_per_kernel)

    @property
    def devices_per_kernel(self) -> int:
        return self.rows_per_kernel * self.cols_per_kernel

    @property
    def n_devices(self) -> int:
        return self.n_kernels * self.devices_per_kernel


@dataclass(frozen=True)
class ConductanceLevels:
    """Programmable states plus the physical conductance bounds.

    ``g_min``/``g_max`` bound what a working device can reach and are the
    values stuck-low / stuck-high devices sit at. They lie outside the level
    span so programming noise around the extreme levels is not clipped.
    """

    levels: tuple[float, ...] = (133.0, 167.0, 200.0, 233.0)
    v_read: float = 0.3
    g_min: float = 100.0
    g_max: float = 300.0
    shorted_factor: float = 10.0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be strictly increasing")
        if not self.g_min <= self.levels[0] or not self.levels[-1] <= self.g_max:
            raise ValueError("levels must lie within [g_min, g_max]")

    @property
    def g_off(self) -> float:
        return self.levels[0]

    @property
    def g_on(self) -> float:
        return self.levels[-1]

    @property
    def g_shorted(self) -> float:
        return self.shorted_factor * self.g_max

    def fault_conductance(self, fault: Fault) -> float:
        return {
            Fault.STUCK_HIGH: self.g_max,
            Fault.STUCK_LOW: self.g_min,
            Fault.SHORTED: self.g_shorted,
        }[Fault(fault)]


@dataclass(frozen=True)
class NoiseConfig:
    prog_sigma: float = 8.0  # uS, per programming attempt
    read_current_sigma: float = 0.5  # uA, additive per row read
    adc_bits: int | None = None
    adc_fullscale: float = 1000.0  # uA
    dac_bits: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.prog_sigma < 0 or self.read_current_sigma < 0:
            raise ValueError("noise sigmas must be nonnegative")
        for bits in (self.adc_bits, self.dac_bits):
            if bits is not None and not 4 <= bits <= 16:
                raise ValueError("converter bits must be off or in [4, 16]")
        if self.adc_fullscale <= 0:
            raise ValueError("adc_fullscale must be positive")

    @classmethod
    def ideal(cls, seed: int = 0) -> "NoiseConfig":
        return cls(prog_sigma=0.0, read_current_sigma=0.0, seed=seed)

    @classmethod
    def hardware_like(cls, seed: int = 0) -> "NoiseConfig":
        return cls(adc_bits=12, dac_bits=12, seed=seed)


NOISE_PRESETS = {
    "ideal": NoiseConfig.ideal,
    "default": NoiseConfig,
    "hardware-like": NoiseConfig.hardware_like,
}


@dataclass(frozen=True)
class Region:
    """A rectangular block of devices inside one kernel."""

    kernel_id: int
    row_offset: int
    col_offset: int
    n_rows: int
    n_cols: int

    @property
    def rows(self) -> slice:
        return slice(self.row_offset, self.row_offset + self.n_rows)

    @property
    def cols(self) -> slice:
        return slice(self.col_offset, self.col_offset + self.n_cols)

    def index(self):
        return (self.kernel_id, self.rows, self.cols)


@dataclass
class ProgramResult:
    success: bool
    iterations: int
    read: float


@dataclass
class BlockWriteResult:
    success: np.ndarray
    read: np.ndarray
    iterations: np.ndarray

    @property
    def yield_fraction(self) -> float:
        return float(self.success.mean())


@dataclass
class SimChip:
    geometry: ChipGeometry
    fault: np.ndarray
    conductance: np.ndarray
    levels: ConductanceLevels
    noise: NoiseConfig
    ideal: bool = False
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.fault.shape != self.geometry.shape or self.conductance.shape != self.geometry.shape:
            raise ValueError("device grid does not match geometry")
        if self.rng is None:
            self.rng = np.random.default_rng(self.noise.seed)

    @property
    def fault_bitmap(self) -> np.ndarray:
        return self.fault != Fault.WORKING

    def check_region(self, region: Region) -> None:
        g = self.geometry
        ok = (
            0 <= region.kernel_id < g.n_kernels
            and region.n_rows > 0
            and region.n_cols > 0
            and 0 <= region.row_offset
            and region.row_offset + region.n_rows <= g.rows_per_kernel
            and 0 <= region.col_offset
            and region.col_offset + region.n_cols <= g.cols_per_kernel
        )
        if not ok:
            raise IndexError(f"region {region} is outside the chip")


def new_chip(noise: NoiseConfig | None = None, ideal: bool = False,
             levels: ConductanceLevels | None = None,
             geometry: ChipGeometry | None = None) -> SimChip:
    """All devices working and sitting at ``g_min``. ``ideal`` disables every noise source."""
    noise = noise or NoiseConfig()
    if ideal:
        noise = replace(noise, prog_sigma=0.0, read_current_sigma=0.0, adc_bits=None, dac_bits=None)
    levels = levels or ConductanceLevels()
    geometry = geometry or ChipGeometry()
    return SimChip(
        geometry=geometry,
        fault=np.zeros(geometry.shape, dtype=np.int8),
        conductance=np.full(geometry.shape, levels.g_min),
        levels=levels,
        noise=noise,
        ideal=ideal,
    )


def faults_for_rate(rate: float, devices_per_kernel: int = 625) -> int:
    # round half up; Python's round() would send 0.5 cases to even
    return int(np.floor(rate * devices_per_kernel + 0.5))


def inject_faults(chip: SimChip, rate: float, mode: Fault = Fault.STUCK_HIGH, seed: int = 0) -> np.ndarray:
    """Fault exactly ``round(rate * 625)`` uniformly chosen devices in every kernel.

    Returns the boolean bitmap of newly faulted devices, shape (K, R, C).
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be within [0, 1]")
    mode = Fault(mode)
    if mode == Fault.WORKING:
        raise ValueError("mode must be a fault kind")
    g = chip.geometry
    n = faults_for_rate(rate, g.devices_per_kernel)
    rng = np.random.default_rng(seed)
    bitmap = np.zeros(g.shape, dtype=bool)
    for k in range(g.n_kernels):
        flat = rng.choice(g.devices_per_kernel, size=n, replace=False)
        bitmap[k].flat[flat] = True
    chip.fault[bitmap] = mode
    chip.conductance[bitmap] = chip.levels.fault_conductance(mode)
    return bitmap


def _read_noise_us(chip: SimChip, shape) -> np.ndarray:
    sigma = chip.noise.read_current_sigma / chip.levels.v_read
    if sigma == 0:
        return np.zeros(shape)
    return chip.rng.normal(0.0, sigma, size=shape)


def program_block(chip: SimChip, region: Region, targets, margin: float = 16.66,
                  max_iters: int = 64) -> BlockWriteResult:
    """Margin-based write-verify on every device of ``region``.

    Each attempt re-draws a working device's conductance around the target
    (gaussian, ``prog_sigma``, clipped to the device bounds) and reads it
    back; a device is done once the read lies within ``target +/- margin``.
    Faulted devices keep their conductance and are verified the same way.
    """
    chip.check_region(region)
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (region.n_rows, region.n_cols):
        raise ValueError(f"targets shape {targets.shape} does not match region")
    if margin <= 0:
        raise ValueError("margin must be positive")
    lv = chip.levels
    if (targets < lv.g_off).any() or (targets > lv.g_on).any():
        raise ValueError("targets must lie within the level span")

    idx = region.index()
    fault = chip.fault[idx]
    g = chip.conductance[idx].copy()
    working = fault == Fault.WORKING
    success = np.zeros(targets.shape, dtype=bool)
    iterations = np.zeros(targets.shape, dtype=np.int64)
    read = np.full(targets.shape, np.nan)

    if chip.ideal:
        g[working] = targets[working]
        read = g.copy()
        success = np.abs(read - targets) <= margin
        iterations[:] = 1
        chip.conductance[idx] = g
        return BlockWriteResult(success, read, iterations)

    active = np.ones(targets.shape, dtype=bool)
    sigma = chip.noise.prog_sigma
    for _ in range(max_iters):
        if not active.any():
            break
        move = active & working
        n_move = int(move.sum())
        if n_move:
            draw = targets[move] + (chip.rng.normal(0.0, sigma, n_move) if sigma > 0 else 0.0)
            g[move] = np.clip(draw, lv.g_min, lv.g_max)
        read[active] = g[active] + _read_noise_us(chip, int(active.sum()))
        iterations[active] += 1
        done = active & (np.abs(read - targets) <= margin)
        success |= done
        active &= ~done
    chip.conductance[idx] = g
    return BlockWriteResult(success, read, iterations)


def program_device(chip: SimChip, addr: tuple[int, int, int], target: float, margin: float = 16.66,
                   max_iters: int = 64) -> ProgramResult:
    k, r, c = addr
    res = program_block(chip, Region(k, r, c, 1, 1), [[target]], margin, max_iters)
    return ProgramResult(bool(res.success[0, 0]), int(res.iterations[0, 0]), float(res.read[0, 0]))


def read_conductance_map(chip: SimChip, region: Region | None = None) -> np.ndarray:
    """One noisy read per device: true conductance plus read-current noise / v_read."""
    if region is None:
        g = chip.conductance
    else:
        chip.check_region(region)
        g = chip.conductance[region.index()]
    return g + _read_noise_us(chip, g.shape)


def _quantize(values: np.ndarray, bits: int, fullscale: float) -> np.ndarray:
    step = fullscale / (2 ** (bits - 1) - 1)
    return np.clip(np.round(values / step) * step, -fullscale, fullscale)


def kernel_vmm(chip: SimChip, kernel_id: int, col_voltages, rng: np.random.Generator | None = None) -> np.ndarray:
    """Row currents (uA) of one kernel for column voltages (V).

    ``col_voltages`` may be a 25-vector or a (B, 25) batch; each row of the
    batch is an independent read with its own noise draw.
    """
    g = chip.geometry
    if not 0 <= kernel_id < g.n_kernels:
        raise IndexError(f"kernel {kernel_id} out of range")
    v = np.asarray(col_voltages, dtype=float)
    if v.shape[-1] != g.cols_per_kernel:
        raise ValueError(f"expected {g.cols_per_kernel} column voltages")
    v_read = chip.levels.v_read
    if not np.isfinite(v).all() or (np.abs(v) > v_read * (1 + 1e-12)).any():
        raise ValueError(f"column voltages must lie within +/-{v_read} V")
    if chip.noise.dac_bits is not None:
        v = _quantize(v, chip.noise.dac_bits, v_read)
    currents = v @ chip.conductance[kernel_id].T
    sigma = chip.noise.read_current_sigma
    if sigma > 0:
        currents = currents + (rng or chip.rng).normal(0.0, sigma, size=currents.shape)
    if chip.noise.adc_bits is not None:
        currents = _quantize(currents, chip.noise.adc_bits, chip.noise.adc_fullscale)
    return currents


def random_levels_write(chip: SimChip, kernel_id: int, seed: int, margin: float = 16.66,
                        max_iters: int = 64) -> tuple[np.ndarray, BlockWriteResult]:
    """Assign every device of a kernel a uniformly random level and program it."""
    g = chip.geometry
    rng = np.random.default_rng(seed)
    levels = np.asarray(chip.levels.levels)
    targets = levels[rng.integers(0, len(levels), size=(g.rows_per_kernel, g.cols_per_kernel))]
    region = Region(kernel_id, 0, 0, g.rows_per_kernel, g.cols_per_kernel)
    return targets, program_block(chip, region, targets, margin, max_iters)


# --------------------------------------------------------------------------
# persistence


def chip_to_dict(chip: SimChip) -> dict:
    return {
        "version": FORMAT_VERSION,
        "geometry": asdict(chip.geometry),
        "levels": asdict(chip.levels),
        "noise": asdict(chip.noise),
        "ideal": chip.ideal,
        "fault": chip.fault.tolist(),
        "conductance": chip.conductance.tolist(),
        "rng_state": chip.rng.bit_generator.state,
    }


def chip_from_dict(doc: dict) -> SimChip:
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported chip file version {doc.get('version')!r}, expected {FORMAT_VERSION}")
    try:
        geometry = ChipGeometry(**doc["geometry"])
        lv = dict(doc["levels"])
        lv["levels"] = tuple(lv["levels"])
        chip = SimChip(
            geometry=geometry,
            fault=np.asarray(doc["fault"], dtype=np.int8),
            conductance=np.asarray(doc["conductance"], dtype=float),
            levels=ConductanceLevels(**lv),
            noise=NoiseConfig(**doc["noise"]),
            ideal=bool(doc["ideal"]),
        )
        chip.rng.bit_generator.state = doc["rng_state"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed chip file: {exc}") from exc
    return chip


def save_chip(chip: SimChip, path) -> None:
    Path(path).write_text(json.dumps(chip_to_dict(chip)))


def load_chip(path) -> SimChip:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed chip file {path}: {exc}") from exc
    return chip_from_dict(doc)


def save_fault_csv(chip: SimChip, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kernel", "row", "col", "fault"])
        for k, r, c in zip(*np.nonzero(chip.fault_bitmap)):
            w.writerow([int(k), int(r), int(c), Fault(chip.fault[k, r, c]).name])
