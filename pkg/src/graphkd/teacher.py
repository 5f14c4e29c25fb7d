"""Two-layer GCN teacher: degree-normalized propagation, average pooling,
an MLP head, and per-sample cross-entropy training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (OptimizerState, Tape, Tensor, add, backward, cross_entropy,
                       glorot_uniform, matmul, mean_rows, optimizer_step, relu)
from .errors import ConfigError, DataError
from .evaluate import micro_f1
from .graphs import Subgraph, normalize_adjacency
from .serialization import read_checkpoint, write_checkpoint

DEFAULT_LEARNING_RATE = {"adam": 0.001, "sgd": 0.01}
TEACHER_MODEL_KIND = "gcn-teacher"
PARAM_NAMES = ("w0", "w1", "head_w1", "head_b1", "head_w2", "head_b2")


@dataclass
class TeacherConfig:
    dim: int
    num_classes: int
    hidden: int = 64
    head_hidden: int = 64
    epochs: int = 30
    optimizer: str = "adam"
    learning_rate: float | None = None
    seed: int = 0

    def resolved_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        if self.optimizer not in DEFAULT_LEARNING_RATE:
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        return DEFAULT_LEARNING_RATE[self.optimizer]

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "head_hidden": self.head_hidden,
            "epochs": self.epochs,
            "optimizer": self.optimizer,
            "learning_rate": self.resolved_learning_rate(),
            "seed": self.seed,
        }


@dataclass
class TeacherParams:
    """GCN weights plus the two-layer classification head."""

    w0: np.ndarray
    w1: np.ndarray
    head_w1: np.ndarray
    head_b1: np.ndarray
    head_w2: np.ndarray
    head_b2: np.ndarray

    def as_list(self) -> list[np.ndarray]:
        return [self.w0, self.w1, self.head_w1, self.head_b1, self.head_w2, self.head_b2]

    @classmethod
    def from_list(cls, arrays: list[np.ndarray]) -> "TeacherParams":
        return cls(*arrays)


def init_teacher(config: TeacherConfig, rng: np.random.Generator) -> TeacherParams:
    """Seeded Glorot-uniform weights, zero biases. Draw order is fixed so
    identical seeds give identical parameters."""
    return TeacherParams(
        w0=glorot_uniform(rng, config.dim, config.hidden),
        w1=glorot_uniform(rng, config.hidden, config.hidden),
        head_w1=glorot_uniform(rng, config.hidden, config.head_hidden),
        head_b1=np.zeros((1, config.head_hidden)),
        head_w2=glorot_uniform(rng, config.head_hidden, config.num_classes),
        head_b2=np.zeros((1, config.num_classes)),
    )


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def gcn_layer(a_hat: Tensor, h: Tensor, w: Tensor, activation: str) -> Tensor:
    """One propagation step: activation(a_hat @ h @ w)."""
    out = matmul(matmul(a_hat, h), w)
    if activation == "relu":
        return relu(out)
    if activation == "identity":
        return out
    raise ConfigError(f"unknown activation '{activation}'")


def average_pool(h: Tensor) -> Tensor:
    return mean_rows(h)


def mlp_head(pooled: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    hidden = relu(add(matmul(pooled, w1), b1))
    return add(matmul(hidden, w2), b2)


def teacher_forward(params: list[Tensor], a_hat: Tensor,
                    features: Tensor) -> tuple[Tensor, Tensor]:
    """Full forward pass; returns (pooled embedding, logits)."""
    w0, w1, head_w1, head_b1, head_w2, head_b2 = params
    h1 = gcn_layer(a_hat, features, w0, "relu")
    h2 = gcn_layer(a_hat, h1, w1, "identity")
    pooled = average_pool(h2)
    logits = mlp_head(pooled, head_w1, head_b1, head_w2, head_b2)
    return pooled, logits


def teacher_logits(params: TeacherParams, subgraph: Subgraph,
                   a_hat: np.ndarray | None = None) -> np.ndarray:
    """Untracked forward pass for prediction; returns the 1 x C logit row."""
    if a_hat is None:
        a_hat = normalize_adjacency(subgraph.adjacency)
    tensors = [Tensor(a) for a in params.as_list()]
    _, logits = teacher_forward(tensors, Tensor(a_hat), Tensor(subgraph.features()))
    return logits.data[0].copy()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _check_dataset(subgraphs: list[Subgraph], config: TeacherConfig, what: str) -> None:
    for sg in subgraphs:
        if sg.nodes[0].embedding.size != config.dim:
            raise ConfigError(
                f"{what} sample '{sg.sample_id}' has dim {sg.nodes[0].embedding.size}, "
                f"expected {config.dim}")
        if not 0 <= sg.label < config.num_classes:
            raise DataError(
                f"{what} sample '{sg.sample_id}' has label {sg.label}, "
                f"but the model has {config.num_classes} classes")


def train_teacher(train: list[Subgraph], val: list[Subgraph], config: TeacherConfig,
                  graph_config: dict | None = None,
                  ) -> tuple[TeacherParams, dict, list[dict]]:
    """Per-sample training in seeded-shuffled order; returns the final-epoch
    parameters, the checkpoint metadata (config echo), and per-epoch metrics
    (mean train loss, validation micro-F1)."""
    if not train:
        raise ConfigError("training split is empty")
    _check_dataset(train, config, "train")
    _check_dataset(val, config, "val")

    rng = np.random.Generator(np.random.PCG64(config.seed))
    params = init_teacher(config, rng)
    master = [Tensor(a) for a in params.as_list()]
    state = OptimizerState(kind=config.optimizer,
                           learning_rate=config.resolved_learning_rate())

    a_hats = [normalize_adjacency(sg.adjacency) for sg in train]
    features = [sg.features() for sg in train]
    labels = [sg.label for sg in train]
    val_a_hats = [normalize_adjacency(sg.adjacency) for sg in val]

    metrics: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        total_loss = 0.0
        for idx in order:
            tape = Tape()
            tracked = [tape.watch(p) for p in master]
            _, logits = teacher_forward(tracked, Tensor(a_hats[idx]),
                                        Tensor(features[idx]))
            loss = cross_entropy(logits, labels[idx])
            table = backward(tape, loss)
            grads = [table[t.node] for t in tracked]
            master = optimizer_step(state, master, grads)
            total_loss += loss.item()

        entry = {"epoch": epoch + 1, "train_loss": total_loss / len(train)}
        if val:
            current = TeacherParams.from_list([p.data for p in master])
            preds = [int(np.argmax(teacher_logits(current, sg, a_hat)))
                     for sg, a_hat in zip(val, val_a_hats)]
            entry["val_micro_f1"] = micro_f1(preds, [sg.label for sg in val])
        metrics.append(entry)

    final = TeacherParams.from_list([p.data.copy() for p in master])
    metadata = {"model": TEACHER_MODEL_KIND, "config": config.to_dict()}
    if graph_config is not None:
        metadata["graph_config"] = graph_config
    return final, metadata, metrics


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_teacher(path, params: TeacherParams, metadata: dict) -> None:
    write_checkpoint(path, metadata, list(zip(PARAM_NAMES, params.as_list())))


def load_teacher(path) -> tuple[TeacherParams, dict]:
    metadata, tensors = read_checkpoint(path)
    if metadata.get("model") != TEACHER_MODEL_KIND:
        raise ConfigError(
            f"{path} holds a '{metadata.get('model')}' model, expected teacher")
    missing = [n for n in PARAM_NAMES if n not in tensors]
    if missing:
        raise ConfigError(f"teacher checkpoint lacks tensors: {missing}")
    return TeacherParams.from_list([tensors[n] for n in PARAM_NAMES]), metadata
