"""Loss, hand-derived reverse-time gradients, Adam, and the training loop.

The loss is the time-averaged cross-entropy over per-step logits. Its
per-step error signal seeds a reverse-time recursion through every layer:
spike gradients use the surrogate derivative at (U - E), the feeding and
linking error terms decay backward with their leak factors, and the
threshold path contributes -V_E times the threshold error to the previous
step's spike gradient. Normalization adjoints (including the batch
statistics' dependence on their input) sit between each error term and
the corresponding weight gradient. Nothing here relies on autodiff.

Gradient checking swaps the hard step for its smooth companion in the
forward pass only; the analytic backward is already exact for that
smoothed system, so central finite differences certify the recursions.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, make_batches
from .network import (
    ARITH_ADD,
    ARITH_MULT,
    COUPLING_MODES,
    COUPLING_NONE,
    NEURON_LIF,
    NEURON_PCNN,
    EpisodeTape,
    Network,
    NetworkSpec,
    build_network,
    forward_episode,
    parse_architecture,
    predict,
)
from .neuron import LifParams, NeuronParams
from .tensor import Array


class ConfigError(ValueError):
    """Raised for invalid training configuration."""


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 50
    epochs: int = 50
    steps: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_min: float = 0.0
    seed: int = 0
    precision: str = "single"  # single | double

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2, got {self.batch_size}")
        if self.steps < 1:
            raise ConfigError(f"time steps must be >= 1, got {self.steps}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be single or double, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32


def tet_loss(logits: Array, targets: Array) -> tuple[float, Array]:
    """Time-averaged cross-entropy on per-step logits.

    logits has shape (T, B, classes); targets holds class indices. Returns
    the batch-mean loss and the matching per-step error signal
    (softmax(O_t) - onehot(y)) / (T * B), which seeds the backward pass.
    """
    t_steps, batch, _ = logits.shape
    shifted = logits - logits.max(axis=2, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=2, keepdims=True)
    idx = np.arange(batch)
    logp = shifted[:, idx, targets] - np.log(exp.sum(axis=2))
    loss = float(-logp.sum() / (t_steps * batch))
    grads = probs.copy()
    grads[:, idx, targets] -= 1.0
    grads /= logits.dtype.type(t_steps * batch)
    return loss, grads


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Cosine-annealed learning rate with period equal to the epoch count."""
    if not 0 <= epoch <= config.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs}]")
    lo, hi = config.lr_min, config.learning_rate
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * epoch / config.epochs))


@dataclass
class AdamState:
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Array]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Array],
    grads: dict[str, Array],
    state: AdamState,
    config: TrainConfig,
    lr: float,
) -> None:
    """Bias-corrected first/second-moment update, in place."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for key, p in params.items():
        g = grads[key]
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + config.adam_eps)


def backward_episode(net: Network, tape: EpisodeTape, loss_grads: Array) -> dict[str, Array]:
    """Reverse-time gradient pass over a recorded episode.

    loss_grads is the (T, B, classes) error signal from tet_loss. Returns
    gradients keyed exactly like net.parameters(); entries untouched by
    the recursion come back as zeros.
    """
    t_steps = net.spec.steps
    if tape.phase != "train":
        raise ValueError("backward pass requires a train-phase tape")
    if len(tape.layers) != len(net.layers) or tape.steps != t_steps:
        raise ValueError(
            f"incomplete tape: {len(tape.layers)} layers x {tape.steps} steps, "
            f"expected {len(net.layers)} x {t_steps}"
        )
    for i, lt in enumerate(tape.layers):
        if lt.preact and len(lt.preact) != t_steps:
            raise ValueError(f"incomplete tape at layer {i}: {len(lt.preact)} steps")
    grads: dict[str, Array] = {}
    gy = net.layers[-1].backward(
        tape.layers[-1], loss_grads, grads, f"layers.{len(net.layers) - 1}"
    )
    for i in range(len(net.layers) - 2, -1, -1):
        gy = net.layers[i].backward(
            tape.layers[i], gy, grads, f"layers.{i}", need_input_grad=(i > 0)
        )
    for name, p in net.parameters().items():
        if name not in grads:
            grads[name] = np.zeros_like(p)
    return grads


def _sequential_batches(images: Array, labels: Array, batch_size: int):
    n = images.shape[0]
    for lo in range(0, n, batch_size):
        yield images[lo : lo + batch_size], labels[lo : lo + batch_size]


def evaluate(
    net: Network,
    ds: Dataset,
    batch_size: int = 100,
    silencing_rate: float = 0.0,
    silencing_rng: np.random.Generator | None = None,
    noise_std: float = 0.0,
    noise_rng: np.random.Generator | None = None,
) -> float:
    """Top-1 accuracy on a dataset split, optionally under a fault model."""
    if ds.images.shape[0] == 0:
        raise ValueError(f"empty split: {ds.name}/{ds.split}")
    correct = 0
    for x, y in _sequential_batches(ds.images, ds.labels, batch_size):
        if noise_std > 0.0:
            x = x + noise_rng.normal(0.0, noise_std, size=x.shape).astype(x.dtype)
        _, logits = forward_episode(
            net,
            x,
            phase="eval",
            silencing_rate=silencing_rate,
            silencing_rng=silencing_rng,
            record=False,
        )
        correct += int(np.sum(predict(logits) == y))
    return correct / ds.images.shape[0]


def train(
    spec: NetworkSpec,
    data: tuple[Dataset, Dataset],
    config: TrainConfig,
    policy=None,
    log=None,
    on_epoch=None,
) -> tuple[Network, list[dict]]:
    """Full training loop: per-episode state reset, forward, loss, backward,
    Adam step; appends one metrics row per epoch.

    Returns the trained network and the metrics history. Raises
    TrainingDiverged as soon as the loss stops being finite.
    """
    train_ds, test_ds = data
    if spec.steps != config.steps:
        raise ConfigError(
            f"config steps ({config.steps}) disagree with network steps ({spec.steps})"
        )
    if config.batch_size > train_ds.images.shape[0]:
        raise ConfigError(
            f"batch size {config.batch_size} exceeds training set size "
            f"{train_ds.images.shape[0]}"
        )
    net = build_network(spec, config.seed, dtype=config.dtype)
    params = net.parameters()
    adam = AdamState.for_params(params)
    history: list[dict] = []
    for epoch in range(config.epochs):
        t0 = time.time()
        lr = cosine_lr(epoch, config)
        loss_sum = 0.0
        seen = 0
        correct = 0
        for x, y in make_batches(train_ds, config.batch_size, config.seed, epoch, policy):
            tape, logits = forward_episode(net, x, phase="train")
            loss, lgrads = tet_loss(logits, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss diverged to {loss} at epoch {epoch} after {seen} samples"
                )
            grads = backward_episode(net, tape, lgrads)
            adam_step(params, grads, adam, config, lr)
            b = x.shape[0]
            loss_sum += loss * b
            correct += int(np.sum(predict(logits) == y))
            seen += b
        test_acc = evaluate(net, test_ds, batch_size=max(config.batch_size, 100))
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / seen,
            "train_acc": correct / seen,
            "test_acc": test_acc,
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if log is not None:
            log(
                f"epoch {epoch}: lr={lr:.6f} train_loss={row['train_loss']:.4f} "
                f"train_acc={row['train_acc']:.4f} test_acc={test_acc:.4f} "
                f"wall={time.time() - t0:.1f}s"
            )
    return net, history


# ---------------------------------------------------------------------------
# gradient checking

MICRO_ARCH = "2C3-2C3-P2-4-3"
MICRO_INPUT = (1, 6, 6)
MICRO_STEPS = 3
MICRO_BATCH = 2


@dataclass
class GradCheckRow:
    name: str
    max_rel_err: float


@dataclass
class GradCheckReport:
    label: str
    rows: list[GradCheckRow]
    tol: float
    details: dict[str, tuple[Array, Array]]

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _rel_err(a: Array, b: Array, floor: float = 1e-6) -> Array:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def grad_check(
    coupling: str = "inter",
    coupling_arith: str = ARITH_MULT,
    bn_mode: str = "rftd",
    neuron_kind: str = NEURON_PCNN,
    neuron: NeuronParams | None = None,
    lif: LifParams | None = None,
    tol: float = 1e-4,
    fd_step: float = 1e-6,
    seed: int = 7,
) -> GradCheckReport:
    """Compare the analytic backward against central finite differences.

    Builds a micro-network in double precision, runs the forward with the
    smooth spike (whose derivative is the surrogate) so the end-to-end loss
    is differentiable, then perturbs every parameter scalar by +/- fd_step.
    Reports the max relative error per parameter array.
    """
    layers = parse_architecture(
        MICRO_ARCH,
        coupling=coupling,
        coupling_kernel="3x3",
        coupling_arith=coupling_arith,
        neuron_kind=neuron_kind,
    )
    spec = NetworkSpec(
        layers=layers,
        steps=MICRO_STEPS,
        neuron=neuron or NeuronParams(),
        lif=lif or LifParams(),
        bn_mode=bn_mode,
        input_shape=MICRO_INPUT,
    )
    net = build_network(spec, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(0.0, 1.0, size=(MICRO_BATCH,) + MICRO_INPUT)
    targets = rng.integers(0, net.output_shape[0], size=MICRO_BATCH)

    def loss_at() -> float:
        _, logits = forward_episode(net, x, phase="train", smooth=True)
        loss, _ = tet_loss(logits, targets)
        return loss

    tape, logits = forward_episode(net, x, phase="train", smooth=True)
    _, lgrads = tet_loss(logits, targets)
    analytic = backward_episode(net, tape, lgrads)

    rows: list[GradCheckRow] = []
    details: dict[str, tuple[Array, Array]] = {}
    for name, p in net.parameters().items():
        flat = p.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            lp = loss_at()
            flat[i] = orig - fd_step
            lm = loss_at()
            flat[i] = orig
            fd[i] = (lp - lm) / (2.0 * fd_step)
        a = analytic[name].reshape(-1)
        rows.append(GradCheckRow(name, float(_rel_err(a, fd).max())))
        details[name] = (a.copy(), fd.copy())
    label = f"coupling={coupling} arith={coupling_arith} bn={bn_mode} neuron={neuron_kind}"
    return GradCheckReport(label=label, rows=rows, tol=tol, details=details)


def grad_check_matrix(tol: float = 1e-4, seed: int = 7) -> list[GradCheckReport]:
    """All valid switch combinations for the verification matrix."""
    reports = []
    for bn_mode in ("rftd", "td", "rfd"):
        reports.append(
            grad_check(coupling=COUPLING_NONE, bn_mode=bn_mode, tol=tol, seed=seed)
        )
        for coupling in ("intra", "inter"):
            for arith in (ARITH_MULT, ARITH_ADD):
                reports.append(
                    grad_check(
                        coupling=coupling,
                        coupling_arith=arith,
                        bn_mode=bn_mode,
                        tol=tol,
                        seed=seed,
                    )
                )
        reports.append(
            grad_check(
                coupling=COUPLING_NONE,
                bn_mode=bn_mode,
                neuron_kind=NEURON_LIF,
                tol=tol,
                seed=seed,
            )
        )
    return reports
