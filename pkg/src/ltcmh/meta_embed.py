"""Prototype-memory meta embedding.

Each modality owns a basic network producing direct features and a shallow
weight network that scores class prototypes. The memory feature is a
softmax-weighted combination of per-class centroids, and the meta feature is

    v_meta = v_direct + eta * v_memory

where eta trades direct against memory evidence. eta comes in three modes:
``intent_ratio`` (default: near-head samples get small eta), ``as_printed``
(the reciprocal ratio), and ``learned`` (a sigmoid-output net).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import HeadTailPartition
from .errors import ConfigError, ShapeError
from .tensor import FeedForwardNet, ForwardCache

ETA_MODES = ("intent_ratio", "as_printed", "learned")
ETA_EPS = 1e-12


@dataclass
class PrototypeBank:
    centroids: np.ndarray   # L x c, zero rows for empty classes
    counts: np.ndarray      # samples per class at computation time
    is_head: np.ndarray     # bool, length L

    @property
    def nonempty(self):
        return self.counts > 0

    @property
    def num_classes(self):
        return self.centroids.shape[0]


@dataclass
class MetaEmbedder:
    basic_net: FeedForwardNet
    weight_net: FeedForwardNet
    eta_mode: str = "intent_ratio"
    eta_net: Optional[FeedForwardNet] = None
    use_memory: bool = True
    eta_max: float = 10.0
    normalize_weights: bool = True

    def __post_init__(self):
        if self.eta_mode not in ETA_MODES:
            raise ConfigError(f"unknown eta mode {self.eta_mode!r}")
        if self.eta_mode == "learned" and self.use_memory and self.eta_net is None:
            raise ConfigError("learned eta mode needs an eta_net")
        if self.weight_net.input_dim != self.basic_net.output_dim:
            raise ShapeError(
                f"weight net input {self.weight_net.input_dim} != "
                f"code length {self.basic_net.output_dim}"
            )

    @property
    def code_length(self):
        return self.basic_net.output_dim


@dataclass
class MetaFeature:
    v_direct: np.ndarray
    v_memory: np.ndarray
    v_meta: np.ndarray
    eta: float
    weights: np.ndarray


@dataclass
class EmbedCache:
    basic_cache: ForwardCache
    v_direct: np.ndarray            # samples x c
    weight_cache: Optional[ForwardCache]
    weights: Optional[np.ndarray]   # samples x L, zero at empty classes
    v_memory: Optional[np.ndarray]  # samples x c
    eta: Optional[np.ndarray]       # per-sample
    eta_cache: Optional[ForwardCache]
    centroids: Optional[np.ndarray]
    mask: Optional[np.ndarray] = None   # non-empty classes, length L


@dataclass
class EmbedGrads:
    basic: list
    weight: Optional[list]
    eta: Optional[list]


def compute_prototypes(direct_features: np.ndarray, labels: np.ndarray,
                       partition: HeadTailPartition) -> PrototypeBank:
    """Per-class mean of direct features; a multi-label sample contributes
    to every class it carries. Empty classes get a zero centroid."""
    direct_features = np.asarray(direct_features, dtype=np.float64)
    labels = np.asarray(labels)
    if direct_features.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"features rows {direct_features.shape[0]} != labels rows "
            f"{labels.shape[0]}"
        )
    counts = labels.sum(axis=0).astype(np.int64)
    sums = labels.astype(np.float64).T @ direct_features
    denom = np.maximum(counts, 1).astype(np.float64)
    centroids = sums / denom[:, None]
    centroids[counts == 0] = 0.0
    return PrototypeBank(centroids=centroids, counts=counts,
                         is_head=np.asarray(partition.is_head, dtype=bool))


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax restricted to mask=True columns; masked entries get 0."""
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _eta_ratio(v_direct: np.ndarray, bank: PrototypeBank, mode: str,
               eta_max: float) -> np.ndarray:
    head = bank.nonempty & bank.is_head
    tail = bank.nonempty & ~bank.is_head
    if not head.any() or not tail.any():
        raise ConfigError(
            "ratio eta modes need at least one non-empty head and tail class"
        )
    # squared distances to every centroid, samples x L
    d2 = ((v_direct[:, None, :] - bank.centroids[None, :, :]) ** 2).sum(axis=2)
    d_head = d2[:, head].min(axis=1)
    d_tail = d2[:, tail].min(axis=1)
    if mode == "intent_ratio":
        eta = d_head / np.maximum(d_tail, ETA_EPS)
    else:
        eta = d_tail / np.maximum(d_head, ETA_EPS)
    return np.clip(eta, 0.0, eta_max)


def _attention_weights(logits: np.ndarray, mask: np.ndarray,
                       normalize: bool) -> np.ndarray:
    if normalize:
        return _masked_softmax(logits, mask)
    return np.where(mask, logits, 0.0)


def memory_feature(v_direct: np.ndarray, bank: PrototypeBank,
                   weight_net: FeedForwardNet, normalize: bool = True):
    """Prototype combination for one sample; weights are the softmax of the
    weight net's logits by default, or the raw logits when normalize=False."""
    if not bank.nonempty.any():
        raise ConfigError("all prototype classes are empty")
    v = np.atleast_2d(np.asarray(v_direct, dtype=np.float64))
    logits, _ = weight_net.forward(v)
    w = _attention_weights(logits, bank.nonempty[None, :], normalize)[0]
    return w @ bank.centroids, w


def eta(v_direct: np.ndarray, bank: PrototypeBank, mode: str,
        eta_net: Optional[FeedForwardNet] = None, eta_max: float = 10.0) -> float:
    """Memory weight for one sample."""
    v = np.atleast_2d(np.asarray(v_direct, dtype=np.float64))
    if mode == "learned":
        if eta_net is None:
            raise ConfigError("learned eta mode needs an eta_net")
        out, _ = eta_net.forward(v)
        return float(out[0, 0])
    if mode not in ETA_MODES:
        raise ConfigError(f"unknown eta mode {mode!r}")
    return float(_eta_ratio(v, bank, mode, eta_max)[0])


def meta_feature(v_direct: np.ndarray, bank: PrototypeBank,
                 weight_net: FeedForwardNet, mode: str,
                 eta_net: Optional[FeedForwardNet] = None,
                 eta_max: float = 10.0) -> MetaFeature:
    v_direct = np.asarray(v_direct, dtype=np.float64)
    v_memory, w = memory_feature(v_direct, bank, weight_net)
    e = eta(v_direct, bank, mode, eta_net=eta_net, eta_max=eta_max)
    return MetaFeature(v_direct=v_direct, v_memory=v_memory,
                       v_meta=v_direct + e * v_memory, eta=e, weights=w)


def embed_batch(embedder: MetaEmbedder, batch: np.ndarray, bank: PrototypeBank):
    """Meta features for a batch, stacked column-wise (c x samples), plus the
    cache needed by embed_backward."""
    v_direct, b_cache = embedder.basic_net.forward(batch)
    if not embedder.use_memory:
        cache = EmbedCache(basic_cache=b_cache, v_direct=v_direct,
                           weight_cache=None, weights=None, v_memory=None,
                           eta=None, eta_cache=None, centroids=None)
        return v_direct.T, cache

    if not bank.nonempty.any():
        raise ConfigError("all prototype classes are empty")
    logits, w_cache = embedder.weight_net.forward(v_direct)
    w = _attention_weights(logits, bank.nonempty[None, :],
                           embedder.normalize_weights)
    v_memory = w @ bank.centroids
    if embedder.eta_mode == "learned":
        eta_out, e_cache = embedder.eta_net.forward(v_direct)
        etas = eta_out[:, 0]
    else:
        etas = _eta_ratio(v_direct, bank, embedder.eta_mode, embedder.eta_max)
        e_cache = None
    v_meta = v_direct + etas[:, None] * v_memory
    cache = EmbedCache(basic_cache=b_cache, v_direct=v_direct,
                       weight_cache=w_cache, weights=w, v_memory=v_memory,
                       eta=etas, eta_cache=e_cache, centroids=bank.centroids,
                       mask=bank.nonempty.copy())
    return v_meta.T, cache


def embed_backward(embedder: MetaEmbedder, cache: EmbedCache,
                   meta_grad: np.ndarray) -> EmbedGrads:
    """Backpropagate dL/dV_meta (c x samples) into network parameters.

    Prototypes are frozen within an epoch, and ratio-mode eta is treated as
    a constant; gradient reaches v_direct both directly and through the
    weight net (and eta net in learned mode).
    """
    g = np.asarray(meta_grad, dtype=np.float64).T   # samples x c
    if g.shape != cache.v_direct.shape:
        raise ShapeError(
            f"meta grad shape {meta_grad.shape} incompatible with cached "
            f"features {cache.v_direct.shape}"
        )
    if not embedder.use_memory:
        basic_grads, _ = embedder.basic_net.backward(cache.basic_cache, g)
        return EmbedGrads(basic=basic_grads, weight=None, eta=None)

    d_vmem = cache.eta[:, None] * g
    d_w = d_vmem @ cache.centroids.T
    w = cache.weights
    if embedder.normalize_weights:
        d_logits = w * (d_w - (d_w * w).sum(axis=1, keepdims=True))
    else:
        d_logits = np.where(cache.mask[None, :], d_w, 0.0)
    weight_grads, d_vdirect_w = embedder.weight_net.backward(
        cache.weight_cache, d_logits)
    d_vdirect = g + d_vdirect_w

    eta_grads = None
    if embedder.eta_mode == "learned":
        d_eta = (g * cache.v_memory).sum(axis=1, keepdims=True)
        eta_grads, d_vdirect_e = embedder.eta_net.backward(cache.eta_cache, d_eta)
        d_vdirect = d_vdirect + d_vdirect_e

    basic_grads, _ = embedder.basic_net.backward(cache.basic_cache, d_vdirect)
    return EmbedGrads(basic=basic_grads, weight=weight_grads, eta=eta_grads)
