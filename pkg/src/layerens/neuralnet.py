"""Bias-free 4-12-6-3 perceptron: SGD / EWC training, ternarization, baselines.

Weights are stored input-major, ``W[l]`` has shape ``(fan_in, fan_out)``, so a
forward pass is ``tanh(x @ W1) -> tanh(. @ W2) -> softmax(. @ W3)``.

Training is written against stacked weights of shape ``(S, fan_in, fan_out)``
so that a whole population of seeds advances in lock-step; a single network is
just a population of one.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .taskgen import MultiTaskDataset, Task, TaskSplit

log = logging.getLogger(__name__)

LAYER_DIMS: tuple[tuple[int, int], ...] = ((4, 12), (12, 6), (6, 3))
ACTIVATIONS = ("tanh", "tanh", "softmax")
METHODS = ("SGD", "EWC")


class TrainingDiverged(RuntimeError):
    pass


class NoQualifyingSolution(RuntimeError):
    pass


@dataclass
class Network:
    weights: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        shapes = tuple(w.shape for w in self.weights)
        if shapes != LAYER_DIMS:
            raise ValueError(f"weight shapes {shapes} != {LAYER_DIMS}")

    def copy(self) -> "Network":
        return Network([w.copy() for w in self.weights])

    @classmethod
    def zeros(cls) -> "Network":
        return cls([np.zeros(s) for s in LAYER_DIMS])


@dataclass
class EwcState:
    anchor_weights: list[np.ndarray]
    fisher: list[np.ndarray]
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if any((f < 0).any() for f in self.fisher):
            raise ValueError("Fisher entries must be nonnegative")
        if tuple(a.shape for a in self.anchor_weights) != LAYER_DIMS:
            raise ValueError("anchor shapes do not match the network")


@dataclass
class Hyperparameters:
    lr: float = 0.05
    batch_size: int = 32
    ewc_lambda: float = 3.0
    epochs_per_task: int = 100


@dataclass
class TrainHistory:
    method: str
    seed: int
    task1_acc: list[float] = field(default_factory=list)
    task2_acc: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> list[int]:
        return list(range(1, len(self.loss) + 1))

    def rows(self):
        for e, a1, a2, l in zip(self.epochs, self.task1_acc, self.task2_acc, self.loss):
            yield {"epoch": e, "method": self.method, "task1_acc": a1, "task2_acc": a2, "loss": l}


@dataclass
class TernarySolution:
    ternary_weights: list[np.ndarray]
    layer_scales: list[float]
    source_accuracy: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.ternary_weights = [np.asarray(t, dtype=np.int64) for t in self.ternary_weights]
        for t in self.ternary_weights:
            if not np.isin(t, (-1, 0, 1)).all():
                raise ValueError("ternary weights must be in {-1, 0, +1}")
        if any(not s > 0 for s in self.layer_scales):
            raise ValueError("layer scales must be positive")

    def effective_network(self) -> Network:
        return Network([s * t.astype(float) for s, t in zip(self.layer_scales, self.ternary_weights)])


# --------------------------------------------------------------------------
# forward / backward


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_stacked(weights, x):
    """``weights`` are (S, i, o) stacks, ``x`` is (S, B, 4). Returns (probs, [h1, h2])."""
    h1 = np.tanh(np.matmul(x, weights[0]))
    h2 = np.tanh(np.matmul(h1, weights[1]))
    return softmax(np.matmul(h2, weights[2])), [h1, h2]


def forward(net: Network, features) -> tuple[np.ndarray, list[np.ndarray]]:
    """Probabilities and hidden activations for one 4-vector or a (B, 4) batch."""
    x = np.asarray(features, dtype=float)
    if x.shape[-1] != 4:
        raise ValueError("features must have length 4")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input")
    h1 = np.tanh(x @ net.weights[0])
    h2 = np.tanh(h1 @ net.weights[1])
    return softmax(h2 @ net.weights[2]), [h1, h2]


def argmax_lowest(p: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximal index
    return np.argmax(p, axis=-1)


def predict(net: Network, features) -> np.ndarray | int:
    p, _ = forward(net, features)
    cls = argmax_lowest(p)
    return int(cls) if np.ndim(cls) == 0 else cls


def _backprop_stacked(weights, x, delta_out):
    """Weight gradients given d(loss)/d(logits) for stacked batches."""
    _, (h1, h2) = _forward_stacked(weights, x)
    g3 = np.matmul(h2.swapaxes(-1, -2), delta_out)
    d2 = np.matmul(delta_out, weights[2].swapaxes(-1, -2)) * (1.0 - h2 * h2)
    g2 = np.matmul(h1.swapaxes(-1, -2), d2)
    d1 = np.matmul(d2, weights[1].swapaxes(-1, -2)) * (1.0 - h1 * h1)
    g1 = np.matmul(x.swapaxes(-1, -2), d1)
    return [g1, g2, g3]


def _onehot(labels, k=3):
    return np.eye(k)[np.asarray(labels)]


def cross_entropy(net: Network, features, labels) -> float:
    p, _ = forward(net, features)
    return float(-np.mean(np.log(p[np.arange(len(labels)), labels])))


def backprop(net: Network, features, labels) -> list[np.ndarray]:
    """Gradients of the mean cross-entropy over the batch w.r.t. each weight matrix."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.atleast_1d(labels)
    if len(labels) == 0:
        raise ValueError("empty batch")
    p, _ = forward(net, x)
    delta = (p - _onehot(labels)) / len(labels)
    return _backprop_stacked(net.weights, x, delta)


def fisher_diagonal(net: Network, features) -> list[np.ndarray]:
    """Empirical diagonal Fisher using the model's own argmax class.

    Mean over samples of the squared per-sample gradient of ``log p(y_hat)``.
    """
    x = np.asarray(features, dtype=float)
    p, (h1, h2) = forward(net, x)
    y_hat = argmax_lowest(p)
    # d log p_yhat / d logits = onehot(y_hat) - p ; per-sample outer products
    d3 = _onehot(y_hat) - p
    d2 = (d3 @ net.weights[2].T) * (1.0 - h2 * h2)
    d1 = (d2 @ net.weights[1].T) * (1.0 - h1 * h1)
    out = []
    for a, d in ((x, d1), (h1, d2), (h2, d3)):
        # mean_n (a_ni d_nj)^2 = (a^2)^T (d^2) / n
        out.append((a * a).T @ (d * d) / len(x))
    return out


def ewc_penalty(net: Network, ewc: EwcState) -> float:
    total = 0.0
    for w, a, f in zip(net.weights, ewc.anchor_weights, ewc.fisher):
        total += float(np.sum(f * (w - a) ** 2))
    return 0.5 * ewc.lam * total


# --------------------------------------------------------------------------
# training


def init_weights(seed: int) -> list[np.ndarray]:
    """Glorot-uniform weights, deterministic per seed."""
    rng = np.random.default_rng(seed)
    ws = []
    for fan_in, fan_out in LAYER_DIMS:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    return ws


def init_network(seed: int) -> Network:
    return Network(init_weights(seed))


def _accuracy_stacked(weights, x, labels) -> np.ndarray:
    p, _ = _forward_stacked(weights, x[None])
    return (argmax_lowest(p) == labels[None]).mean(axis=-1)


def _train_phase(weights, rngs, split: TaskSplit, hp: Hyperparameters, data: MultiTaskDataset,
                 history: list[TrainHistory], ewc=None):
    """Run ``hp.epochs_per_task`` epochs of mini-batch SGD on one task, in place."""
    x_all, y_all = split.features, split.labels
    onehot_all = _onehot(y_all)
    n = len(y_all)
    n_pop = len(rngs)
    t1, t2 = data.test_task1, data.test_task2
    for _ in range(hp.epochs_per_task):
        perm = np.stack([r.permutation(n) for r in rngs])
        loss_sum = np.zeros(n_pop)
        for start in range(0, n, hp.batch_size):
            idx = perm[:, start:start + hp.batch_size]
            xb, yb = x_all[idx], onehot_all[idx]
            p, _ = _forward_stacked(weights, xb)
            loss_sum += -np.log(np.sum(p * yb, axis=-1)).sum(axis=-1)
            grads = _backprop_stacked(weights, xb, (p - yb) / idx.shape[1])
            for l in range(3):
                if ewc is not None:
                    anchor, fisher, lam = ewc
                    grads[l] = grads[l] + lam * fisher[l] * (weights[l] - anchor[l])
                weights[l] -= hp.lr * grads[l]
        loss = loss_sum / n
        if ewc is not None:
            anchor, fisher, lam = ewc
            loss = loss + 0.5 * lam * sum(
                np.sum(fisher[l] * (weights[l] - anchor[l]) ** 2, axis=(1, 2)) for l in range(3)
            )
        if not np.isfinite(loss).all():
            bad = [h.seed for h, v in zip(history, loss) if not np.isfinite(v)]
            raise TrainingDiverged(f"non-finite loss for seeds {bad}; lower the learning rate")
        a1 = _accuracy_stacked(weights, t1.features, t1.labels)
        a2 = _accuracy_stacked(weights, t2.features, t2.labels)
        for i, h in enumerate(history):
            h.task1_acc.append(float(a1[i]))
            h.task2_acc.append(float(a2[i]))
            h.loss.append(float(loss[i]))


def train_population(
    seeds: Sequence[int],
    data: MultiTaskDataset,
    method: str = "EWC",
    hp: Hyperparameters | None = None,
) -> list[tuple[Network, TrainHistory, EwcState | None]]:
    """Train one network per seed: Task 1 then Task 2 (with EWC if requested).

    The result for a seed does not depend on which other seeds share the run.
    """
    hp = hp or Hyperparameters()
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    seeds = list(seeds)
    weights = [np.stack(ws) for ws in zip(*(init_weights(s) for s in seeds))]
    # shuffling stream separate from the init stream
    rngs = [np.random.default_rng([s, 1]) for s in seeds]
    history = [TrainHistory(method, s) for s in seeds]

    _train_phase(weights, rngs, data.train_task1, hp, data, history)

    ewc_states: list[EwcState | None] = [None] * len(seeds)
    ewc = None
    if method == "EWC":
        anchors = [w.copy() for w in weights]
        fishers = []
        for i in range(len(seeds)):
            net = Network([w[i] for w in weights])
            fishers.append(fisher_diagonal(net, data.train_task1.features))
            ewc_states[i] = EwcState([a[i].copy() for a in anchors], fishers[-1], hp.ewc_lambda)
        ewc = (anchors, [np.stack(f) for f in zip(*fishers)], hp.ewc_lambda)

    _train_phase(weights, rngs, data.train_task2, hp, data, history, ewc=ewc)

    return [
        (Network([w[i].copy() for w in weights]), history[i], ewc_states[i])
        for i in range(len(seeds))
    ]


def train_continual(seed: int, data: MultiTaskDataset, method: str = "EWC",
                    hp: Hyperparameters | None = None) -> tuple[Network, TrainHistory]:
    net, hist, _ = train_population([seed], data, method, hp)[0]
    return net, hist


# --------------------------------------------------------------------------
# evaluation and baselines


def evaluate(model, split: TaskSplit) -> float:
    """Fraction of argmax-correct predictions. ``model`` is a Network or TernarySolution."""
    if len(split) == 0:
        raise ValueError("empty split")
    net = model.effective_network() if isinstance(model, TernarySolution) else model
    return float(np.mean(predict(net, split.features) == split.labels))


def linear_baseline(train: TaskSplit, test: TaskSplit, tol: float = 1e-6, max_iter: int = 10_000,
                    lr: float = 1.0) -> float:
    """Test accuracy of bias-free multinomial logistic regression (full-batch GD)."""
    x, y = train.features, _onehot(train.labels)
    w = np.zeros((x.shape[1], 3))
    for _ in range(max_iter):
        g = x.T @ (softmax(x @ w) - y) / len(x)
        if np.linalg.norm(g) < tol:
            break
        w -= lr * g
    pred = argmax_lowest(test.features @ w)
    return float(np.mean(pred == test.labels))


def linear_baselines(data: MultiTaskDataset) -> dict[str, float]:
    return {
        "task1": linear_baseline(data.train_task1, data.test_task1),
        "task2": linear_baseline(data.train_task2, data.test_task2),
    }


# --------------------------------------------------------------------------
# ternarization


def ternarize_matrix(w: np.ndarray, ratio: float = 0.7) -> tuple[np.ndarray, float]:
    w = np.asarray(w, dtype=float)
    delta = ratio * np.mean(np.abs(w))
    keep = np.abs(w) > delta
    if not keep.any():
        raise ValueError("degenerate layer: no weight survives the threshold")
    return (np.sign(w) * keep).astype(np.int64), float(np.mean(np.abs(w[keep])))


def ternarize(net: Network, data: MultiTaskDataset | None = None) -> TernarySolution:
    tw, scales = [], []
    for w in net.weights:
        t, s = ternarize_matrix(w)
        tw.append(t)
        scales.append(s)
    sol = TernarySolution(tw, scales)
    if data is not None:
        sol.source_accuracy = {
            "task1": evaluate(sol, data.test_task1),
            "task2": evaluate(sol, data.test_task2),
        }
    return sol


def select_solution(candidates: Sequence[tuple[Network, TernarySolution]],
                    baseline: dict[str, float]) -> int:
    """Index of the candidate with the best worst-task ternary accuracy.

    Only candidates beating ``baseline`` on both tasks qualify.
    """
    if not candidates:
        raise ValueError("no candidates")
    best, best_score = None, -np.inf
    for i, (_, sol) in enumerate(candidates):
        a1, a2 = sol.source_accuracy["task1"], sol.source_accuracy["task2"]
        if a1 <= baseline["task1"] or a2 <= baseline["task2"]:
            continue
        if min(a1, a2) > best_score:
            best, best_score = i, min(a1, a2)
    if best is None:
        raise NoQualifyingSolution(
            "no quantized candidate beats the linear baseline on both tasks; train more seeds"
        )
    return best


def hyperparameters_dict(hp: Hyperparameters) -> dict:
    return asdict(hp)
