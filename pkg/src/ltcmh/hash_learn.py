"""Joint hash-code learning.

The objective over meta feature matrices Vx, Vy (c x n, columns = samples)
and the unified sign matrix B is

    J = -sum_ij (a_ij Phi_ij - log(1 + e^Phi_ij))
        + alpha (||B - Vx||_F^2 + ||B - Vy||_F^2)
        + beta  (||Vx 1||^2 + ||Vy 1||^2)

with Phi_ij = 1/2 <Vx_i, Vy_j>. Network parameters are trained by exact
analytic gradients through the meta embedders; B is updated in closed form
as sign(Vx + Vy), alternating with the continuous steps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

import numpy as np

from . import meta_embed
from .dataset import (HeadTailPartition, MultiModalDataset, split_head_tail)
from .errors import ConfigError, FormatError, ShapeError, TrainingError
from .meta_embed import MetaEmbedder, PrototypeBank, compute_prototypes
from .tensor import (FeedForwardNet, LayerSpec, read_net, sgd_step, sigmoid,
                     softplus, write_net, MODEL_MAGIC)

MODEL_FORMAT_VERSION = 2


@dataclass(frozen=True)
class TrainConfig:
    code_length: int = 16
    alpha: float = 1.0
    beta: float = 1.0
    learning_rate: float = 0.03
    momentum: float = 0.0
    epochs: int = 60
    batch_columns: int = 64
    seed: int = 0
    eta_mode: str = "intent_ratio"
    eta_max: float = 2.0
    head_threshold: int = 100
    hidden_dim: int = 64
    no_memory: bool = False
    # optimization stabilizers: gradients are averaged over the training
    # set, each network's update is clipped to a global norm, the prototype
    # banks track the moving direct features with an exponential average,
    # and the memory path is switched on only after a warm-up phase with
    # the attention weights initialized to nearest-centroid matching.
    clip_norm: float = 1.0
    bank_momentum: float = 0.9
    warmup_epochs: int = 40
    attention_init_scale: float = 3.0
    normalize_weights: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.code_length < 1 or self.batch_columns < 1:
            raise ConfigError("code_length and batch_columns must be >= 1")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0 (0 disables clipping)")
        if not 0.0 <= self.bank_momentum < 1.0:
            raise ConfigError("bank_momentum must be in [0, 1)")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.attention_init_scale < 0:
            raise ConfigError("attention_init_scale must be >= 0")


@dataclass
class LossBreakdown:
    nll: float
    quantization: float
    balance: float
    alpha: float
    beta: float

    @property
    def total(self):
        return self.nll + self.alpha * self.quantization + self.beta * self.balance


@dataclass
class HashModel:
    embedder_x: MetaEmbedder
    embedder_y: MetaEmbedder
    bank_x: PrototypeBank
    bank_y: PrototypeBank
    B: np.ndarray            # c x n_train, entries +-1
    alpha: float
    beta: float
    train_indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    query_indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    retrieval_indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    @property
    def code_length(self):
        return self.embedder_x.code_length

    @property
    def partition(self) -> HeadTailPartition:
        return HeadTailPartition(is_head=self.bank_x.is_head,
                                 counts=self.bank_x.counts)


def pairwise_phi(Vx: np.ndarray, Vy: np.ndarray) -> np.ndarray:
    """Phi_ij = 1/2 <Vx column i, Vy column j>."""
    Vx = np.asarray(Vx, dtype=np.float64)
    Vy = np.asarray(Vy, dtype=np.float64)
    if Vx.shape[0] != Vy.shape[0]:
        raise ShapeError(f"code lengths differ: {Vx.shape} vs {Vy.shape}")
    return 0.5 * (Vx.T @ Vy)


def nll_loss(phi: np.ndarray, A: np.ndarray) -> float:
    """-sum_ij (a_ij phi_ij - softplus(phi_ij)), softplus evaluated stably."""
    phi = np.asarray(phi, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if phi.shape != A.shape:
        raise ShapeError(f"phi shape {phi.shape} != affinity shape {A.shape}")
    return float(-(A * phi - softplus(phi)).sum())


def quantization_loss(B: np.ndarray, Vx: np.ndarray, Vy: np.ndarray) -> float:
    return float(((B - Vx) ** 2).sum() + ((B - Vy) ** 2).sum())


def balance_loss(Vx: np.ndarray, Vy: np.ndarray) -> float:
    sx = Vx.sum(axis=1)
    sy = Vy.sum(axis=1)
    return float(sx @ sx + sy @ sy)


def objective(Vx, Vy, A, B, alpha, beta) -> LossBreakdown:
    return LossBreakdown(
        nll=nll_loss(pairwise_phi(Vx, Vy), A),
        quantization=quantization_loss(B, Vx, Vy),
        balance=balance_loss(Vx, Vy),
        alpha=alpha, beta=beta,
    )


def grad_Vx(Vx, Vy, A, B, alpha, beta) -> np.ndarray:
    """dJ/dVx, column i = 1/2 sum_j (sigma(Phi_ij) - a_ij) Vy_j
    + 2 alpha (Vx_i - B_i) + 2 beta Vx 1."""
    phi = pairwise_phi(Vx, Vy)
    g = 0.5 * (Vy @ (sigmoid(phi) - A).T)
    g += 2.0 * alpha * (Vx - B)
    g += 2.0 * beta * Vx.sum(axis=1, keepdims=True)
    return g


def grad_Vy(Vx, Vy, A, B, alpha, beta) -> np.ndarray:
    phi = pairwise_phi(Vx, Vy)
    g = 0.5 * (Vx @ (sigmoid(phi) - A))
    g += 2.0 * alpha * (Vy - B)
    g += 2.0 * beta * Vy.sum(axis=1, keepdims=True)
    return g


def update_B(Vx: np.ndarray, Vy: np.ndarray) -> np.ndarray:
    """B = sign(Vx + Vy), with sign(0) = +1 for reproducibility."""
    if Vx.shape != Vy.shape:
        raise ShapeError(f"shapes differ: {Vx.shape} vs {Vy.shape}")
    return np.where(Vx + Vy >= 0.0, 1.0, -1.0)


# --- model construction and training -----------------------------------------

def _build_embedder(input_dim: int, num_classes: int, config: TrainConfig,
                    rng: np.random.Generator) -> MetaEmbedder:
    c = config.code_length
    basic = FeedForwardNet(
        [LayerSpec(input_dim, config.hidden_dim, "relu"),
         LayerSpec(config.hidden_dim, c, "identity")], rng)
    weight = FeedForwardNet([LayerSpec(c, num_classes, "identity")], rng)
    eta_net = None
    if config.eta_mode == "learned":
        eta_net = FeedForwardNet([LayerSpec(c, 1, "sigmoid")], rng)
    return MetaEmbedder(basic_net=basic, weight_net=weight,
                        eta_mode=config.eta_mode, eta_net=eta_net,
                        use_memory=not config.no_memory,
                        eta_max=config.eta_max,
                        normalize_weights=config.normalize_weights)


def _refresh_bank(embedder: MetaEmbedder, features: np.ndarray,
                  labels: np.ndarray, partition: HeadTailPartition) -> PrototypeBank:
    direct, _ = embedder.basic_net.forward(features)
    return compute_prototypes(direct, labels, partition)


def _embedder_nets(e: MetaEmbedder):
    nets = [e.basic_net]
    if e.use_memory:
        nets.append(e.weight_net)
        if e.eta_mode == "learned":
            nets.append(e.eta_net)
    return nets


def _clip_grads(grads, max_norm: float):
    """Scale a per-net gradient list so its global L2 norm is <= max_norm."""
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float((dw * dw).sum() + (db * db).sum())
                        for dw, db in grads))
    scale = min(1.0, max_norm / max(total, 1e-12))
    if scale >= 1.0:
        return grads
    return [(dw * scale, db * scale) for dw, db in grads]


def _apply_grads(embedder: MetaEmbedder, grads: meta_embed.EmbedGrads,
                 config: TrainConfig, velocities: dict):
    pairs = [("basic", embedder.basic_net, grads.basic)]
    if grads.weight is not None:
        pairs.append(("weight", embedder.weight_net, grads.weight))
    if grads.eta is not None:
        pairs.append(("eta", embedder.eta_net, grads.eta))
    for name, net, g in pairs:
        g = _clip_grads(g, config.clip_norm)
        velocities[name] = sgd_step(net, g, config.learning_rate,
                                    momentum=config.momentum,
                                    velocity=velocities.get(name))


def _switch_on_memory(embedder: MetaEmbedder, bank: PrototypeBank,
                      features: np.ndarray, labels: np.ndarray,
                      partition: HeadTailPartition, config: TrainConfig):
    """End of memory warm-up: refresh the bank from current direct features
    and initialize the attention weights to scaled nearest-centroid matching
    (logits k·C·v − k‖C‖²/2, the log-posterior of an isotropic Gaussian
    mixture over the prototypes)."""
    fresh = _refresh_bank(embedder, features, labels, partition)
    bank.centroids[:] = fresh.centroids
    bank.counts[:] = fresh.counts
    k = config.attention_init_scale
    if k > 0:
        embedder.weight_net.weights[0][:] = k * bank.centroids
        embedder.weight_net.biases[0][:] = \
            -0.5 * k * (bank.centroids ** 2).sum(axis=1)
    embedder.use_memory = True


def train(dataset: MultiModalDataset, train_indices: np.ndarray,
          config: TrainConfig, affinity: Optional[np.ndarray] = None):
    """Alternating optimization over the training split.

    The first min(warmup_epochs, epochs) epochs train the direct features
    alone. At the switchover the prototype banks are rebuilt, the attention
    weights are initialized to nearest-centroid matching, and the memory
    path is enabled; from then on the banks track the moving direct
    features with momentum. Per epoch: SGD passes over column minibatches
    of each modality against the full cross-modal objective (gradients
    averaged over the training set), then B is recomputed in closed form.
    Returns (model, history) where history holds one record per epoch
    including the loss before and after the B step.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if train_indices.size == 0:
        raise ConfigError("training split is empty")
    X = dataset.X[train_indices]
    Y = dataset.Y[train_indices]
    labels = dataset.labels[train_indices]
    n = train_indices.size
    if affinity is None:
        from .dataset import build_affinity
        affinity = build_affinity(labels, labels)
    A = affinity.astype(np.float64)

    rng = np.random.default_rng(config.seed)
    counts = labels.sum(axis=0).astype(np.int64)
    partition = split_head_tail(counts, config.head_threshold)
    ex = _build_embedder(X.shape[1], dataset.num_classes, config, rng)
    ey = _build_embedder(Y.shape[1], dataset.num_classes, config, rng)
    memory_on = not config.no_memory
    if memory_on:
        # warm-up: start with the memory path off
        ex.use_memory = False
        ey.use_memory = False
    switch_epoch = min(config.warmup_epochs, config.epochs)

    bank_x = _refresh_bank(ex, X, labels, partition)
    bank_y = _refresh_bank(ey, Y, labels, partition)
    Vx, _ = meta_embed.embed_batch(ex, X, bank_x)
    Vy, _ = meta_embed.embed_batch(ey, Y, bank_y)
    B = update_B(Vx, Vy)

    history = []
    vel_x, vel_y = {}, {}
    for epoch in range(config.epochs):
        if memory_on and epoch == switch_epoch:
            _switch_on_memory(ex, bank_x, X, labels, partition, config)
            _switch_on_memory(ey, bank_y, Y, labels, partition, config)
        elif memory_on and epoch > switch_epoch:
            for embedder, bank, feats in ((ex, bank_x, X), (ey, bank_y, Y)):
                fresh = _refresh_bank(embedder, feats, labels, partition)
                m = config.bank_momentum
                bank.centroids[:] = (m * bank.centroids
                                     + (1.0 - m) * fresh.centroids)
                bank.counts[:] = fresh.counts
        Vx, _ = meta_embed.embed_batch(ex, X, bank_x)
        Vy, _ = meta_embed.embed_batch(ey, Y, bank_y)

        order = rng.permutation(n)
        for side, embedder, bank, feats, V, vel in (
                ("x", ex, bank_x, X, Vx, vel_x),
                ("y", ey, bank_y, Y, Vy, vel_y)):
            for start in range(0, n, config.batch_columns):
                cols = order[start:start + config.batch_columns]
                v_batch, cache = meta_embed.embed_batch(embedder, feats[cols], bank)
                V[:, cols] = v_batch
                if side == "x":
                    phi = pairwise_phi(V[:, cols], Vy)
                    g = 0.5 * (Vy @ (sigmoid(phi) - A[cols, :]).T)
                else:
                    phi = pairwise_phi(Vx, V[:, cols])
                    g = 0.5 * (Vx @ (sigmoid(phi) - A[:, cols]))
                g += 2.0 * config.alpha * (V[:, cols] - B[:, cols])
                g += 2.0 * config.beta * V.sum(axis=1, keepdims=True)
                g /= n
                if not np.all(np.isfinite(g)):
                    raise TrainingError(
                        f"non-finite gradient at epoch {epoch}, side {side}, "
                        f"batch starting {start}")
                grads = meta_embed.embed_backward(embedder, cache, g)
                _apply_grads(embedder, grads, config, vel)

        pre = objective(Vx, Vy, A, B, config.alpha, config.beta)
        B = update_B(Vx, Vy)
        post = objective(Vx, Vy, A, B, config.alpha, config.beta)
        if not np.isfinite(post.total):
            raise TrainingError(f"non-finite loss at epoch {epoch}: {post}")
        history.append({
            "epoch": epoch,
            "nll": post.nll,
            "quantization": post.quantization,
            "balance": post.balance,
            "total": post.total,
            "pre_b_total": pre.total,
            "post_b_total": post.total,
        })

    if memory_on and switch_epoch >= config.epochs:
        # the whole run was warm-up; enable the memory path on the final
        # parameters so the persisted model still embeds meta features
        _switch_on_memory(ex, bank_x, X, labels, partition, config)
        _switch_on_memory(ey, bank_y, Y, labels, partition, config)
        Vx, _ = meta_embed.embed_batch(ex, X, bank_x)
        Vy, _ = meta_embed.embed_batch(ey, Y, bank_y)
        B = update_B(Vx, Vy)

    model = HashModel(embedder_x=ex, embedder_y=ey, bank_x=bank_x,
                      bank_y=bank_y, B=B, alpha=config.alpha,
                      beta=config.beta, train_indices=train_indices)
    return model, history


def encode_features(model: HashModel, features: np.ndarray, modality: str):
    """Meta features (c x samples) for new data using the stored banks."""
    if modality == "image":
        V, _ = meta_embed.embed_batch(model.embedder_x, features, model.bank_x)
    elif modality == "text":
        V, _ = meta_embed.embed_batch(model.embedder_y, features, model.bank_y)
    else:
        raise ConfigError(f"unknown modality {modality!r}")
    return V


# --- persistence --------------------------------------------------------------

def _write_array(f: BinaryIO, arr: np.ndarray, dtype: str):
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(f: BinaryIO, dtype: str) -> np.ndarray:
    buf = f.read(4)
    if len(buf) != 4:
        raise FormatError(f"truncated array header at offset {f.tell()}")
    (ndim,) = struct.unpack("<I", buf)
    shape = []
    for _ in range(ndim):
        dim = f.read(8)
        if len(dim) != 8:
            raise FormatError(f"truncated array shape at offset {f.tell()}")
        (d,) = struct.unpack("<Q", dim)
        shape.append(d)
    count = int(np.prod(shape)) if shape else 1
    itemsize = np.dtype(dtype).itemsize
    buf = f.read(count * itemsize)
    if len(buf) != count * itemsize:
        raise FormatError(f"truncated array data at offset {f.tell()}")
    return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()


def _write_embedder(f: BinaryIO, e: MetaEmbedder):
    mode = meta_embed.ETA_MODES.index(e.eta_mode)
    f.write(struct.pack("<BBBd", mode, int(e.use_memory),
                        int(e.normalize_weights), e.eta_max))
    write_net(f, e.basic_net)
    write_net(f, e.weight_net)
    f.write(struct.pack("<B", int(e.eta_net is not None)))
    if e.eta_net is not None:
        write_net(f, e.eta_net)


def _read_embedder(f: BinaryIO) -> MetaEmbedder:
    buf = f.read(11)
    if len(buf) != 11:
        raise FormatError(f"truncated embedder header at offset {f.tell()}")
    mode, use_memory, normalize, eta_max = struct.unpack("<BBBd", buf)
    basic = read_net(f)
    weight = read_net(f)
    flag = f.read(1)
    if len(flag) != 1:
        raise FormatError(f"truncated embedder at offset {f.tell()}")
    (has_eta,) = struct.unpack("<B", flag)
    eta_net = read_net(f) if has_eta else None
    return MetaEmbedder(basic_net=basic, weight_net=weight,
                        eta_mode=meta_embed.ETA_MODES[mode],
                        eta_net=eta_net, use_memory=bool(use_memory),
                        eta_max=eta_max, normalize_weights=bool(normalize))


def _write_bank(f: BinaryIO, bank: PrototypeBank):
    _write_array(f, bank.centroids, "<f8")
    _write_array(f, bank.counts, "<i8")
    _write_array(f, bank.is_head.astype(np.uint8), "<u1")


def _read_bank(f: BinaryIO) -> PrototypeBank:
    centroids = _read_array(f, "<f8")
    counts = _read_array(f, "<i8")
    is_head = _read_array(f, "<u1").astype(bool)
    return PrototypeBank(centroids=centroids, counts=counts, is_head=is_head)


def save_model(path, model: HashModel):
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", MODEL_FORMAT_VERSION))
        f.write(struct.pack("<dd", model.alpha, model.beta))
        _write_embedder(f, model.embedder_x)
        _write_embedder(f, model.embedder_y)
        _write_bank(f, model.bank_x)
        _write_bank(f, model.bank_y)
        _write_array(f, model.B, "<f8")
        _write_array(f, model.train_indices, "<i8")
        _write_array(f, model.query_indices, "<i8")
        _write_array(f, model.retrieval_indices, "<i8")


def load_model(path) -> HashModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MODEL_MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0")
        (version,) = struct.unpack("<I", f.read(4))
        if version != MODEL_FORMAT_VERSION:
            raise FormatError(f"unsupported model version {version} at offset 4")
        alpha, beta = struct.unpack("<dd", f.read(16))
        ex = _read_embedder(f)
        ey = _read_embedder(f)
        bank_x = _read_bank(f)
        bank_y = _read_bank(f)
        B = _read_array(f, "<f8")
        train_idx = _read_array(f, "<i8")
        query_idx = _read_array(f, "<i8")
        retrieval_idx = _read_array(f, "<i8")
    return HashModel(embedder_x=ex, embedder_y=ey, bank_x=bank_x,
                     bank_y=bank_y, B=B, alpha=alpha, beta=beta,
                     train_indices=train_idx, query_indices=query_idx,
                     retrieval_indices=retrieval_idx)
