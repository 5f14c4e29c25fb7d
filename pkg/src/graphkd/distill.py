"""Soft-label distillation from frozen graph teachers into small students.

Students see only the four content-node embeddings -- no commonsense nodes
and no adjacency. Whatever the retrieval-augmented teacher learned reaches
them exclusively through its averaged softmax outputs, which is the point
of the transfer. Two student bodies are provided: a two-layer perceptron
over the concatenated embeddings and a minimal single-head transformer
block over the four embeddings as a token sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (OptimizerState, Tape, Tensor, add, affine, backward,
                       cross_entropy, glorot_uniform, matmul, mean_rows, mul,
                       optimizer_step, relu, reshape, row_log_softmax,
                       row_softmax, sum_all, transpose)
from .errors import ConfigError, DataError, ShapeError
from .evaluate import micro_f1
from .graphs import Subgraph, normalize_adjacency
from .serialization import read_checkpoint, write_checkpoint
from .teacher import (DEFAULT_LEARNING_RATE, TEACHER_MODEL_KIND, TeacherParams,
                      load_teacher, teacher_logits)

STUDENT_KINDS = ("mlp", "transformer")
MLP_PARAM_NAMES = ("w1", "b1", "w2", "b2")
TRANSFORMER_PARAM_NAMES = ("kind_embed", "wq", "wk", "wv", "ff_w1", "ff_b1",
                           "ff_w2", "ff_b2", "out_w", "out_b")


@dataclass
class DistillConfig:
    student: str
    dim: int
    num_classes: int
    hidden: int = 64
    kd_weight: float = 1.0
    temperature: float = 1.0
    epochs: int = 30
    optimizer: str = "adam"
    learning_rate: float | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.student not in STUDENT_KINDS:
            raise ConfigError(f"unknown student kind '{self.student}'")
        if self.kd_weight < 0:
            raise ConfigError(f"kd weight must be >= 0, got {self.kd_weight}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    def resolved_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        if self.optimizer not in DEFAULT_LEARNING_RATE:
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        return DEFAULT_LEARNING_RATE[self.optimizer]

    def to_dict(self) -> dict:
        return {
            "student": self.student,
            "dim": self.dim,
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "kd_weight": self.kd_weight,
            "temperature": self.temperature,
            "epochs": self.epochs,
            "optimizer": self.optimizer,
            "learning_rate": self.resolved_learning_rate(),
            "seed": self.seed,
        }


@dataclass
class StudentParams:
    kind: str
    tensors: list[np.ndarray]

    @property
    def names(self) -> tuple[str, ...]:
        return MLP_PARAM_NAMES if self.kind == "mlp" else TRANSFORMER_PARAM_NAMES


def init_student(config: DistillConfig, rng: np.random.Generator) -> StudentParams:
    """Seeded Glorot weights, zero biases; the transformer's kind embeddings
    start at zero so the block is initially permutation-symmetric."""
    d, h, c = config.dim, config.hidden, config.num_classes
    if config.student == "mlp":
        return StudentParams("mlp", [
            glorot_uniform(rng, 4 * d, h),
            np.zeros((1, h)),
            glorot_uniform(rng, h, c),
            np.zeros((1, c)),
        ])
    return StudentParams("transformer", [
        np.zeros((4, d)),
        glorot_uniform(rng, d, d),
        glorot_uniform(rng, d, d),
        glorot_uniform(rng, d, d),
        glorot_uniform(rng, d, h),
        np.zeros((1, h)),
        glorot_uniform(rng, h, d),
        np.zeros((1, d)),
        glorot_uniform(rng, d, c),
        np.zeros((1, c)),
    ])


# ---------------------------------------------------------------------------
# Student forward passes
# ---------------------------------------------------------------------------

def student_forward(kind: str, params: list[Tensor], content: Tensor,
                    internals: dict | None = None) -> Tensor:
    """Logits for one sample from its 4 x dim content embeddings (fixed kind
    order). Pass a dict as ``internals`` to capture the attention weights."""
    if content.rows != 4:
        raise ShapeError(f"students take exactly 4 content rows, got {content.rows}")
    if kind == "mlp":
        w1, b1, w2, b2 = params
        flat = reshape(content, 1, 4 * content.cols)
        hidden = relu(add(matmul(flat, w1), b1))
        return add(matmul(hidden, w2), b2)
    if kind == "transformer":
        kind_embed, wq, wk, wv, ff_w1, ff_b1, ff_w2, ff_b2, out_w, out_b = params
        x = add(content, kind_embed)
        q = matmul(x, wq)
        k = matmul(x, wk)
        v = matmul(x, wv)
        attn = row_softmax(affine(matmul(q, transpose(k)), 1.0 / math.sqrt(content.cols)))
        if internals is not None:
            internals["attention"] = attn.data
        mixed = matmul(attn, v)
        ff = add(matmul(relu(add(matmul(mixed, ff_w1), ff_b1)), ff_w2), ff_b2)
        pooled = mean_rows(ff)
        return add(matmul(pooled, out_w), out_b)
    raise ConfigError(f"unknown student kind '{kind}'")


def student_logits(params: StudentParams, subgraph: Subgraph) -> np.ndarray:
    """Untracked prediction from the subgraph's content embeddings."""
    tensors = [Tensor(a) for a in params.tensors]
    logits = student_forward(params.kind, tensors, Tensor(subgraph.content_features()))
    return logits.data[0].copy()


# ---------------------------------------------------------------------------
# Distillation losses
# ---------------------------------------------------------------------------

def _np_row_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    e = np.exp(shifted)
    return e / e.sum()


def teacher_soft_labels(teachers: list[TeacherParams], subgraph: Subgraph,
                        temperature: float = 1.0,
                        a_hat: np.ndarray | None = None) -> np.ndarray:
    """Mean over the ensemble of softmax(teacher logits / temperature)."""
    if not teachers:
        raise ConfigError("need at least one teacher")
    rows = []
    widths = set()
    for params in teachers:
        logits = teacher_logits(params, subgraph, a_hat=a_hat)
        widths.add(logits.size)
        rows.append(_np_row_softmax(logits / temperature))
    if len(widths) != 1:
        raise ConfigError(f"teachers disagree on class count: {sorted(widths)}")
    return np.mean(rows, axis=0)


def kd_loss(p_teacher: np.ndarray, student_logits_t: Tensor,
            temperature: float = 1.0) -> Tensor:
    """KL(teacher distribution || student softmax at the same temperature),
    scaled by temperature^2 (a no-op at the default temperature 1)."""
    p = np.asarray(p_teacher, dtype=np.float64).reshape(-1)
    if student_logits_t.rows != 1 or p.size != student_logits_t.cols:
        raise ShapeError(
            f"teacher row has {p.size} classes, student logits are "
            f"{student_logits_t.rows}x{student_logits_t.cols}")
    if abs(p.sum() - 1.0) > 1e-6:
        raise DataError(f"teacher distribution sums to {p.sum()!r}, not 1")
    positive = p[p > 0]
    entropy_term = float(np.sum(positive * np.log(positive)))
    scaled = affine(student_logits_t, 1.0 / temperature)
    log_student = row_log_softmax(scaled)
    cross = sum_all(mul(log_student, Tensor(p.reshape(1, -1))))
    t_sq = temperature * temperature
    return affine(cross, -t_sq, t_sq * entropy_term)


def combined_loss(l_sce: Tensor, l_kd: Tensor | None, kd_weight: float) -> Tensor:
    """l_sce + kd_weight * l_kd; with weight 0 the supervised loss passes
    through untouched (the "without framework" baseline)."""
    if kd_weight < 0:
        raise ConfigError(f"kd weight must be >= 0, got {kd_weight}")
    if kd_weight == 0.0 or l_kd is None:
        return l_sce
    return add(l_sce, affine(l_kd, kd_weight))


# ---------------------------------------------------------------------------
# Student training
# ---------------------------------------------------------------------------

def compute_soft_labels(teachers: list[TeacherParams], subgraphs: list[Subgraph],
                        temperature: float = 1.0) -> list[tuple[str, np.ndarray]]:
    """Soft labels for a whole dataset in sample order (teachers are frozen,
    so this is computed once and reused across epochs)."""
    out = []
    for sg in subgraphs:
        a_hat = normalize_adjacency(sg.adjacency)
        out.append((sg.sample_id, teacher_soft_labels(teachers, sg, temperature,
                                                      a_hat=a_hat)))
    return out


def train_student(train: list[Subgraph], val: list[Subgraph], config: DistillConfig,
                  teachers: list[TeacherParams],
                  teacher_names: list[str] | None = None,
                  ) -> tuple[StudentParams, dict, list[dict]]:
    """Per-sample distillation training. The teacher ensemble is only
    consulted when kd_weight > 0; a zero weight reproduces the plain
    supervised baseline bit for bit."""
    config.validate()
    if not train:
        raise ConfigError("training split is empty")
    for sg in train + val:
        if sg.nodes[0].embedding.size != config.dim:
            raise ConfigError(
                f"sample '{sg.sample_id}' has dim {sg.nodes[0].embedding.size}, "
                f"expected {config.dim}")
        if not 0 <= sg.label < config.num_classes:
            raise DataError(f"sample '{sg.sample_id}' has label {sg.label}, "
                            f"but the model has {config.num_classes} classes")

    use_kd = config.kd_weight > 0
    soft_rows: list[np.ndarray] = []
    if use_kd:
        if not teachers:
            raise ConfigError("kd_weight > 0 requires at least one teacher")
        soft_rows = [row for _, row in
                     compute_soft_labels(teachers, train, config.temperature)]
        for row in soft_rows:
            if row.size != config.num_classes:
                raise ConfigError(
                    f"teacher produces {row.size} classes, student expects "
                    f"{config.num_classes}")

    rng = np.random.Generator(np.random.PCG64(config.seed))
    params = init_student(config, rng)
    master = [Tensor(a) for a in params.tensors]
    state = OptimizerState(kind=config.optimizer,
                           learning_rate=config.resolved_learning_rate())

    content = [sg.content_features() for sg in train]
    labels = [sg.label for sg in train]

    metrics: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        total_loss = 0.0
        for idx in order:
            tape = Tape()
            tracked = [tape.watch(p) for p in master]
            logits = student_forward(config.student, tracked, Tensor(content[idx]))
            sce = cross_entropy(logits, labels[idx])
            if use_kd:
                kd = kd_loss(soft_rows[idx], logits, config.temperature)
                loss = combined_loss(sce, kd, config.kd_weight)
            else:
                loss = sce
            table = backward(tape, loss)
            grads = [table[t.node] for t in tracked]
            master = optimizer_step(state, master, grads)
            total_loss += loss.item()

        entry = {"epoch": epoch + 1, "train_loss": total_loss / len(train)}
        if val:
            current = StudentParams(config.student, [p.data for p in master])
            preds = [int(np.argmax(student_logits(current, sg))) for sg in val]
            entry["val_micro_f1"] = micro_f1(preds, [sg.label for sg in val])
        metrics.append(entry)

    final = StudentParams(config.student, [p.data.copy() for p in master])
    metadata = {
        "model": f"student-{config.student}",
        "config": config.to_dict(),
        "teachers": list(teacher_names or []),
    }
    return final, metadata, metrics


# ---------------------------------------------------------------------------
# Checkpoints and model loading
# ---------------------------------------------------------------------------

def save_student(path, params: StudentParams, metadata: dict) -> None:
    write_checkpoint(path, metadata, list(zip(params.names, params.tensors)))


def load_student(path) -> tuple[StudentParams, dict]:
    metadata, tensors = read_checkpoint(path)
    model = metadata.get("model", "")
    if not model.startswith("student-"):
        raise ConfigError(f"{path} holds a '{model}' model, expected a student")
    kind = model.removeprefix("student-")
    if kind not in STUDENT_KINDS:
        raise ConfigError(f"unknown student kind '{kind}' in {path}")
    names = MLP_PARAM_NAMES if kind == "mlp" else TRANSFORMER_PARAM_NAMES
    missing = [n for n in names if n not in tensors]
    if missing:
        raise ConfigError(f"student checkpoint lacks tensors: {missing}")
    return StudentParams(kind, [tensors[n] for n in names]), metadata


def load_predictor(path):
    """Open any checkpoint and return (predict(subgraph) -> logit row,
    metadata). Teachers consume the full subgraph, students only the
    content embeddings."""
    metadata, _ = read_checkpoint(path)
    model = metadata.get("model")
    if model == TEACHER_MODEL_KIND:
        params, metadata = load_teacher(path)
        return (lambda sg: teacher_logits(params, sg)), metadata
    if isinstance(model, str) and model.startswith("student-"):
        sparams, metadata = load_student(path)
        return (lambda sg: student_logits(sparams, sg)), metadata
    raise ConfigError(f"{path} holds an unknown model kind '{model}'")
