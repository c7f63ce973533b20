"""Training DEPICT decoders by backpropagation, plus the two baselines used
to judge them: a dataset-wide linear classifier and per-image PCA
segmentation with optimal label matching."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize

from . import autograd as ag
from .datagen import stack
from .decoder import DecoderParams, init_params, predict_labels
from .errors import ConfigInvalid, Divergence
from .matcore import derive_seed, rng
from .subspace import pca_segment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "momentum"  # or "sgd"
    momentum: float = 0.9
    loss: str = "cross_entropy"
    decay_every: int = 6  # step decay period in epochs, 0 = constant lr
    decay_factor: float = 0.5

    def __post_init__(self):
        if not self.lr >= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigInvalid("need lr >= 0, epochs >= 1, batch_size >= 1")
        if self.optimizer not in ("sgd", "momentum"):
            raise ConfigInvalid(f"unknown optimizer {self.optimizer!r}")
        if self.loss != "cross_entropy":
            raise ConfigInvalid("only per-patch cross-entropy is supported")

    def to_dict(self):
        return asdict(self)


def param_nodes(params):
    """Leaf nodes for every tensor of ``params``, keyed by flatten() name."""
    return {name: ag.leaf(arr, name) for name, arr in params.flatten()}


def _mssa_graph(S, nodes, tag, config):
    P, alpha = nodes[f"{tag}.P"], nodes[f"{tag}.alpha"]
    Zn = ag.layer_norm(S, nodes[f"{tag}.gain"], nodes[f"{tag}.bias"], config.ln_eps)
    M = config.head_dim
    attn = None
    for h in range(config.heads):
        Ph = ag.columns(P, h * M, (h + 1) * M)
        PhT = ag.transpose(Ph)
        X = ag.matmul(PhT, Zn)
        A = ag.softmax_cols(ag.matmul(ag.transpose(X), X))
        term = ag.matmul(Ph, ag.matmul(X, A))
        attn = term if attn is None else ag.add(attn, term)
    return ag.add(S, _update(Zn, attn, alpha, S.shape[-1], config))


def _msca_graph(Q, Z, nodes, tag, config):
    P, alpha = nodes[f"{tag}.P"], nodes[f"{tag}.alpha"]
    Zn = ag.layer_norm(Z, nodes[f"{tag}.gain"], nodes[f"{tag}.bias"], config.ln_eps)
    M = config.head_dim
    attn = None
    for h in range(config.heads):
        Ph = ag.columns(P, h * M, (h + 1) * M)
        PhT = ag.transpose(Ph)
        X = ag.matmul(PhT, Zn)
        A = ag.softmax_cols(ag.matmul(ag.transpose(X), ag.matmul(PhT, Q)))
        term = ag.matmul(Ph, ag.matmul(X, A))
        attn = term if attn is None else ag.add(attn, term)
    return ag.add(Q, _update(Q, attn, alpha, Z.shape[-1], config))


def _update(base, attn, alpha, n, config):
    if config.step_form == "simplified":
        return ag.scale(ag.mul_scalar(attn, alpha), -1.0)
    a = config.head_dim / (n * config.epsilon**2)
    return ag.mul_scalar(ag.scale(ag.sub(base, ag.scale(attn, a)), a), alpha)


def _normalize_cols(Q):
    norm = np.sqrt(np.sum(Q.value**2, axis=-2, keepdims=True) + 1e-12)

    def back(g):
        y = Q.value / norm
        return ((g - y * np.sum(g * y, axis=-2, keepdims=True)) / norm,)

    return ag.Node(Q.value / norm, (Q,), back, "normalize_cols")


def decoder_graph(nodes, config, Z):
    """Mask logits (..., C, N) as a graph node; mirrors ``decoder.forward``."""
    Zn = ag.constant(Z) if not isinstance(Z, ag.Node) else Z
    N = Zn.shape[-1]
    if config.variant == "SA":
        S = ag.concat(Zn, nodes["q0"])
        for i in range(config.sa_layers):
            S = _mssa_graph(S, nodes, f"sa{i}", config)
        Zr = ag.columns(S, 0, N)
        Q = ag.columns(S, N, S.shape[-1])
    else:
        Zr = Zn
        for i in range(config.sa_layers):
            Zr = _mssa_graph(Zr, nodes, f"sa{i}", config)
        Q = nodes["q0"]
        for i in range(config.ca_layers):
            Q = _msca_graph(Q, Zr, nodes, f"ca{i}", config)
    if config.final_norm:
        Zr = ag.layer_norm(Zr, nodes["final.gain"], nodes["final.bias"], config.ln_eps)
    if config.normalize_queries:
        Q = _normalize_cols(Q)
    return ag.matmul(ag.transpose(Q), Zr)


def loss_graph(nodes, config, Z, labels):
    return ag.cross_entropy(decoder_graph(nodes, config, Z), labels)


def batched_logits(params, config, Z):
    """(B, C, N) logits for a stack of images."""
    return decoder_graph(param_nodes(params), config, np.asarray(Z)).value


def accuracy(params, config, images, batch=64):
    correct = total = 0
    for s in range(0, len(images), batch):
        Z, y = stack(images[s : s + batch])
        pred = predict_labels(batched_logits(params, config, Z))
        correct += int(np.sum(pred == y))
        total += y.size
    return correct / max(total, 1)


def train_depict(dataset, model_config, train_config, init: Optional[DecoderParams] = None):
    """SGD (optionally with momentum) on per-patch cross-entropy.

    Returns the trained params and one history row per epoch with the mean
    training loss and training patch accuracy.
    """
    if not dataset:
        raise ConfigInvalid("dataset is empty")
    tc = train_config
    params = init if init is not None else init_params(model_config, derive_seed(tc.seed, "init"))
    names = [n for n, _ in params.flatten()]
    arrays = [np.array(a, dtype=np.float64) for _, a in params.flatten()]
    velocity = [np.zeros_like(a) for a in arrays]
    Zall, yall = stack(dataset)
    history = []
    for epoch in range(tc.epochs):
        lr = tc.lr
        if tc.decay_every:
            lr *= tc.decay_factor ** (epoch // tc.decay_every)
        order = rng(derive_seed(tc.seed, f"epoch:{epoch}")).permutation(len(dataset))
        losses, correct, total = [], 0, 0
        for s in range(0, len(order), tc.batch_size):
            idx = order[s : s + tc.batch_size]
            nodes = {n: ag.leaf(a, n) for n, a in zip(names, arrays)}
            logits = decoder_graph(nodes, model_config, Zall[idx])
            loss = ag.cross_entropy(logits, yall[idx])
            value, grads = ag.value_and_grad(loss, [nodes[n] for n in names])
            if not np.isfinite(value):
                raise Divergence(epoch)
            losses.append(value)
            correct += int(np.sum(predict_labels(logits.value) == yall[idx]))
            total += yall[idx].size
            for i, g in enumerate(grads):
                if tc.optimizer == "momentum":
                    velocity[i] = tc.momentum * velocity[i] + g
                    arrays[i] = arrays[i] - lr * velocity[i]
                else:
                    arrays[i] = arrays[i] - lr * g
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": correct / total}
        log.info("epoch %d loss %.4f acc %.4f", epoch, row["loss"], row["accuracy"])
        history.append(row)
    return params.with_arrays(arrays), history


# --- baselines ---------------------------------------------------------------


@dataclass
class LinearProbe:
    weight: np.ndarray  # C x D
    bias: np.ndarray  # C

    def logits(self, Z):
        return np.einsum("cd,...dn->...cn", self.weight, Z) + self.bias[:, None]

    def predict(self, Z):
        return predict_labels(self.logits(Z))


def fit_linear_probe(images, num_classes, l2=1e-4, maxiter=500):
    """Multinomial logistic regression on every patch of every image (L-BFGS)."""
    Z, y = stack(images)
    X = np.moveaxis(Z, -2, -1).reshape(-1, Z.shape[-2])  # patches x D
    y = y.reshape(-1)
    n, D = X.shape
    C = num_classes
    Y = np.eye(C)[y]

    def f(theta):
        W = theta[: C * D].reshape(C, D)
        b = theta[C * D :]
        L = X @ W.T + b
        L -= L.max(axis=1, keepdims=True)
        lse = np.log(np.exp(L).sum(axis=1))
        loss = np.mean(lse - np.sum(L * Y, axis=1)) + 0.5 * l2 * np.sum(W * W)
        Pm = np.exp(L - lse[:, None])
        G = (Pm - Y) / n
        gW = G.T @ X + l2 * W
        return loss, np.concatenate([gW.ravel(), G.sum(axis=0)])

    res = minimize(f, np.zeros(C * D + C), jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
    theta = res.x
    return LinearProbe(theta[: C * D].reshape(C, D), theta[C * D :])


def linear_probe_accuracy(probe, images):
    Z, y = stack(images)
    return float(np.mean(probe.predict(Z) == y))


def matched_accuracy(pred, truth, num_classes):
    """Fraction correct after the best one-to-one relabelling of ``pred``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    k = max(num_classes, int(pred.max()) + 1, int(truth.max()) + 1)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (pred, truth), 1)
    r, c = linear_sum_assignment(-conf)
    return conf[r, c].sum() / truth.size


def pca_segment_accuracy(images, num_classes):
    """Per-image PCA segmentation with per-image optimal label matching."""
    correct = total = 0
    for im in images:
        pred = pca_segment(im.embeddings, num_classes)
        correct += matched_accuracy(pred, im.labels, num_classes) * im.labels.size
        total += im.labels.size
    return correct / total
