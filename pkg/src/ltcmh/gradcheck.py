"""Finite-difference validation suites for every hand-written gradient."""

from __future__ import annotations

import numpy as np

from . import hash_learn, meta_embed
from .dataset import HeadTailPartition
from .meta_embed import MetaEmbedder, compute_prototypes
from .tensor import (FeedForwardNet, LayerSpec, _activate, _activate_grad,
                     finite_diff_grad)


def rel_err(analytic, numeric):
    """Max elementwise |a - f| / (1e-8 + |a| + |f|)."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    return float((np.abs(a - f) / (1e-8 + np.abs(a) + np.abs(f))).max())


def check_activations(seed=0, points=100, eps=1e-6):
    """Activation derivatives vs central differences at random points."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in ("identity", "relu", "sigmoid", "tanh"):
        x = rng.uniform(-4, 4, size=points)
        if name == "relu":
            # keep away from the kink, where FD is undefined
            x = x[np.abs(x) > 1e-3]
        a = _activate(name, x)
        analytic = _activate_grad(name, x, a)
        numeric = (_activate(name, x + eps) - _activate(name, x - eps)) / (2 * eps)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def check_net_backward(seed=0, eps=1e-6, corrupt=False):
    """Full-net parameter gradients vs finite_diff_grad for a random scalar
    loss (weighted sum of outputs)."""
    rng = np.random.default_rng(seed)
    net = FeedForwardNet([LayerSpec(4, 5, "tanh"), LayerSpec(5, 3, "sigmoid"),
                          LayerSpec(3, 2, "identity")], rng)
    batch = rng.normal(size=(6, 4))
    R = rng.normal(size=(6, 2))

    def loss_fn(n):
        out, _ = n.forward(batch)
        return float((R * out).sum())

    out, cache = net.forward(batch)
    analytic, _ = net.backward(cache, R)
    numeric = finite_diff_grad(loss_fn, net, eps)
    worst = 0.0
    for (adw, adb), (ndw, ndb) in zip(analytic, numeric):
        if corrupt:
            adw = adw + 0.05
        worst = max(worst, rel_err(adw, ndw), rel_err(adb, ndb))
    return worst


def check_objective_grad(instances=50, seed=0, eps=1e-6, corrupt=False,
                         max_n=8, max_c=8):
    """Analytic dJ/dVx and dJ/dVy vs central differences of the joint
    objective with V treated as free variables."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, max_n + 1))
        c = int(rng.integers(2, max_c + 1))
        Vx = rng.normal(size=(c, n))
        Vy = rng.normal(size=(c, n))
        A = rng.integers(0, 2, size=(n, n)).astype(np.float64)
        B = np.where(rng.normal(size=(c, n)) >= 0, 1.0, -1.0)
        alpha = float(rng.uniform(0.1, 2.0))
        beta = float(rng.uniform(0.1, 2.0))

        def total(vx, vy):
            return hash_learn.objective(vx, vy, A, B, alpha, beta).total

        for which, V, analytic in (
                ("x", Vx, hash_learn.grad_Vx(Vx, Vy, A, B, alpha, beta)),
                ("y", Vy, hash_learn.grad_Vy(Vx, Vy, A, B, alpha, beta))):
            numeric = np.zeros_like(V)
            flat = V.ravel()
            nflat = numeric.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = total(Vx, Vy)
                flat[i] = orig - eps
                lo = total(Vx, Vy)
                flat[i] = orig
                nflat[i] = (hi - lo) / (2 * eps)
            if corrupt:
                analytic = analytic + 0.05
            worst = max(worst, rel_err(analytic, numeric))
    return worst


def _tiny_embed_setup(seed, eta_mode, normalize=True):
    rng = np.random.default_rng(seed)
    c, L, d, n = 3, 4, 5, 6
    basic = FeedForwardNet([LayerSpec(d, 4, "tanh"), LayerSpec(4, c, "identity")], rng)
    weight = FeedForwardNet([LayerSpec(c, L, "identity")], rng)
    eta_net = (FeedForwardNet([LayerSpec(c, 1, "sigmoid")], rng)
               if eta_mode == "learned" else None)
    embedder = MetaEmbedder(basic_net=basic, weight_net=weight,
                            eta_mode=eta_mode, eta_net=eta_net,
                            normalize_weights=normalize)
    batch = rng.normal(size=(n, d))
    labels = np.zeros((n, L), dtype=np.uint8)
    labels[np.arange(n), rng.integers(0, L, size=n)] = 1
    partition = HeadTailPartition(is_head=np.array([True, True, False, False]),
                                  counts=labels.sum(axis=0))
    direct, _ = basic.forward(batch)
    bank = compute_prototypes(direct, labels, partition)
    R = rng.normal(size=(c, n))
    return embedder, batch, bank, R


def check_embed_backward(seed=0, eps=1e-6, eta_mode="intent_ratio",
                         corrupt=False, normalize=True):
    """embed_backward vs finite differences through the full meta embedding
    (bank held fixed, matching the stop-gradient on prototypes and ratio eta).
    """
    embedder, batch, bank, R = _tiny_embed_setup(seed, eta_mode, normalize)
    _, cache0 = meta_embed.embed_batch(embedder, batch, bank)
    frozen_eta = None if cache0.eta is None else cache0.eta.copy()

    def loss_with(net):
        if eta_mode == "learned":
            v_meta, _ = meta_embed.embed_batch(embedder, batch, bank)
            return float((R * v_meta).sum())
        # ratio eta is a stop-gradient constant: evaluate the embedding with
        # eta frozen at its cached values so the oracle matches the defined
        # derivative
        direct, _ = embedder.basic_net.forward(batch)
        logits, _ = embedder.weight_net.forward(direct)
        w = meta_embed._attention_weights(logits, bank.nonempty[None, :],
                                          normalize)
        v_memory = w @ bank.centroids
        v_meta = (direct + frozen_eta[:, None] * v_memory).T
        return float((R * v_meta).sum())

    _, cache = meta_embed.embed_batch(embedder, batch, bank)
    grads = meta_embed.embed_backward(embedder, cache, R)
    worst = 0.0
    checked = [(embedder.basic_net, grads.basic),
               (embedder.weight_net, grads.weight)]
    if eta_mode == "learned":
        checked.append((embedder.eta_net, grads.eta))
    for net, analytic in checked:
        numeric = finite_diff_grad(loss_with, net, eps)
        for (adw, adb), (ndw, ndb) in zip(analytic, numeric):
            if corrupt:
                adw = adw + 0.05
            worst = max(worst, rel_err(adw, ndw), rel_err(adb, ndb))
    return worst


def run_all(seed=0, corrupt=False):
    """All suites; returns {suite name: max relative error}."""
    return {
        "activations": check_activations(seed),
        "net_backward": check_net_backward(seed, corrupt=corrupt),
        "objective_grad": check_objective_grad(instances=10, seed=seed,
                                               corrupt=corrupt,
                                               max_n=5, max_c=5),
        "embed_backward": check_embed_backward(seed, corrupt=corrupt),
        "embed_backward_learned": check_embed_backward(seed,
                                                       eta_mode="learned",
                                                       corrupt=corrupt),
        "embed_backward_raw": check_embed_backward(seed, corrupt=corrupt,
                                                   normalize=False),
    }
