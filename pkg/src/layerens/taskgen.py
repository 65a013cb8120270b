"""Two-task Yin-Yang dataset for continual learning.

Task 1 is the classic Yin-Yang problem on the unit square with mirrored
coordinates appended, ``(x, y, 1 - x, 1 - y)``. Task 2 is the same
construction shifted by +1 in every feature component, so both tasks live
inside ``[0, 2]^4``.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

YIN, YANG, DOT = 0, 1, 2
CLASS_NAMES = ("yin", "yang", "dot")


class Task(enum.IntEnum):
    TASK1 = 1
    TASK2 = 2


TASK_OFFSET = {Task.TASK1: 0.0, Task.TASK2: 1.0}


class OutsideSymbol(ValueError):
    """Raised by :func:`classify_point` for points outside the big circle."""


@dataclass(frozen=True)
class YinYangGeometry:
    r_big: float = 0.5
    r_small: float = 0.1

    def __post_init__(self):
        if not 0 < self.r_small < self.r_big / 2:
            raise ValueError("need 0 < r_small < r_big / 2")

    @property
    def center(self) -> tuple[float, float]:
        return (self.r_big, self.r_big)

    @property
    def left_dot(self) -> tuple[float, float]:
        return (0.5 * self.r_big, self.r_big)

    @property
    def right_dot(self) -> tuple[float, float]:
        return (1.5 * self.r_big, self.r_big)


DEFAULT_GEOMETRY = YinYangGeometry()


def _class_of(x, y, geom: YinYangGeometry):
    """Vectorised class predicate; assumes the points are inside the symbol."""
    r_big, r_small = geom.r_big, geom.r_small
    d_right = np.hypot(x - 1.5 * r_big, y - r_big)
    d_left = np.hypot(x - 0.5 * r_big, y - r_big)
    is_dot = (d_right <= r_small) | (d_left <= r_small)
    # yin: the lower-left lobe around the left dot plus the upper half outside
    # the right lobe
    is_yin = (d_left <= 0.5 * r_big) | ((y > r_big) & (d_right > 0.5 * r_big))
    return np.where(is_dot, DOT, np.where(is_yin, YIN, YANG))


def inside_symbol(x, y, geom: YinYangGeometry = DEFAULT_GEOMETRY):
    return np.hypot(x - geom.r_big, y - geom.r_big) <= geom.r_big


def classify_point(x: float, y: float, geom: YinYangGeometry = DEFAULT_GEOMETRY) -> int:
    """Return the class (YIN, YANG or DOT) of a point in unit-square coordinates."""
    if not inside_symbol(x, y, geom):
        raise OutsideSymbol(f"({x}, {y}) lies outside the symbol")
    return int(_class_of(x, y, geom))


def featurize(x, y, task: Task = Task.TASK1) -> np.ndarray:
    """Map pre-offset coordinates to the 4-d feature vector of ``task``.

    Complements are taken in the unit square, then the task offset is added
    to all four components. Accepts scalars or equal-length arrays.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    feats = np.stack([x, y, 1.0 - x, 1.0 - y], axis=-1)
    return feats + TASK_OFFSET[Task(task)]


@dataclass
class TaskSplit:
    """Samples of one task: pre-offset coordinates, features and labels."""

    task: Task
    xy: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=3)


def sample_task(task: Task, n: int, seed: int, geom: YinYangGeometry = DEFAULT_GEOMETRY) -> TaskSplit:
    """Draw ``n`` class-balanced samples by rejection sampling.

    Goal classes cycle yin, yang, dot so class counts differ by at most one.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    goals = np.arange(n) % 3
    xy = np.empty((n, 2))
    side = 2.0 * geom.r_big
    for i, goal in enumerate(goals):
        while True:
            x, y = rng.random(2) * side
            if not inside_symbol(x, y, geom):
                continue
            if _class_of(x, y, geom) == goal:
                xy[i] = (x, y)
                break
    return TaskSplit(Task(task), xy, featurize(xy[:, 0], xy[:, 1], task), goals.astype(np.int64))


@dataclass
class MultiTaskDataset:
    train_task1: TaskSplit
    test_task1: TaskSplit
    train_task2: TaskSplit
    test_task2: TaskSplit
    seed: int
    geometry: YinYangGeometry = field(default=DEFAULT_GEOMETRY)

    def splits(self) -> dict[str, TaskSplit]:
        return {
            "train_task1": self.train_task1,
            "test_task1": self.test_task1,
            "train_task2": self.train_task2,
            "test_task2": self.test_task2,
        }

    def train(self, task: Task) -> TaskSplit:
        return self.train_task1 if Task(task) == Task.TASK1 else self.train_task2

    def test(self, task: Task) -> TaskSplit:
        return self.test_task1 if Task(task) == Task.TASK1 else self.test_task2


def make_multitask_dataset(
    n_train: int = 5000,
    n_test: int = 1000,
    seed: int = 42,
    geom: YinYangGeometry = DEFAULT_GEOMETRY,
) -> MultiTaskDataset:
    if n_train <= 0 or n_test <= 0:
        raise ValueError("split sizes must be positive")
    sub = np.random.SeedSequence(seed).generate_state(4)
    return MultiTaskDataset(
        train_task1=sample_task(Task.TASK1, n_train, int(sub[0]), geom),
        test_task1=sample_task(Task.TASK1, n_test, int(sub[1]), geom),
        train_task2=sample_task(Task.TASK2, n_train, int(sub[2]), geom),
        test_task2=sample_task(Task.TASK2, n_test, int(sub[3]), geom),
        seed=seed,
        geometry=geom,
    )


CSV_HEADER = ["task", "x", "y", "f0", "f1", "f2", "f3", "label"]


def save_dataset_csv(data: MultiTaskDataset, directory) -> list[Path]:
    """Write ``train.csv`` and ``test.csv`` (both tasks each) into ``directory``.

    ``x``/``y`` are the pre-offset unit-square coordinates.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for kind in ("train", "test"):
        path = directory / f"{kind}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for task in Task:
                split = getattr(data, f"{kind}_task{int(task)}")
                for (x, y), f, lab in zip(split.xy, split.features, split.labels):
                    w.writerow([int(task), repr(float(x)), repr(float(y)), *(repr(float(v)) for v in f), int(lab)])
        paths.append(path)
    return paths


def _read_split_file(path) -> dict[Task, TaskSplit]:
    per_task: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for r in reader:
            per_task.setdefault(int(r["task"]), []).append(r)
    out = {}
    for task in Task:
        rs = per_task.get(int(task))
        if not rs:
            raise ValueError(f"{path}: no rows for task {int(task)}")
        xy = np.array([[float(r["x"]), float(r["y"])] for r in rs])
        feats = np.array([[float(r[f"f{i}"]) for i in range(4)] for r in rs])
        labels = np.array([int(r["label"]) for r in rs], dtype=np.int64)
        out[task] = TaskSplit(task, xy, feats, labels)
    return out


def load_dataset_csv(directory, seed: int = -1) -> MultiTaskDataset:
    directory = Path(directory)
    train = _read_split_file(directory / "train.csv")
    test = _read_split_file(directory / "test.csv")
    return MultiTaskDataset(
        train_task1=train[Task.TASK1],
        test_task1=test[Task.TASK1],
        train_task2=train[Task.TASK2],
        test_task2=test[Task.TASK2],
        seed=seed,
    )
