"""Downstream evaluation: frozen representations, linear heads, fine-tuning, metrics."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError, EmptyDataError, FrozenViolationError, UndefinedMetricError
from .nn.model import ModelState
from .nn.optim import sgd_step
from .pipeline import ViewStore, assemble_batch

DEFAULT_HEAD_EPOCHS = 100
DEFAULT_HEAD_LR = 0.01
DEFAULT_FINETUNE_LR = 0.01
THRESHOLD = 0.5


@dataclass
class RepresentationRecord:
    lesion_id: str
    per_view: dict
    vector: np.ndarray
    label: object = None


@dataclass
class HeadState:
    weight: np.ndarray  # [C, F]
    bias: np.ndarray  # [C]
    mean: np.ndarray  # feature standardisation, fixed at fit time
    std: np.ndarray
    classes: tuple = ()
    from_scratch: bool = True

    def logits(self, x):
        return ((x - self.mean) / self.std) @ self.weight.T + self.bias

    def predict_proba(self, x):
        return softmax(self.logits(x))

    def predict(self, x):
        return self.predict_proba(x).argmax(axis=1)


@dataclass
class MetricReport:
    auc: float
    sensitivity: float
    specificity: float
    accuracy: float
    precision: float
    n_samples: int
    per_class_auc: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def encoder_hash(state: ModelState) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(state.encoder_parameters().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- representations -------------------------------------------------------

def concat_representations(state: ModelState, view_set, label=None) -> RepresentationRecord:
    """Encoder outputs of every view, concatenated in plane-id order (projector unused)."""
    views = sorted(view_set.views, key=lambda v: v.plane_id)
    planes = tuple(v.plane_id for v in views)
    if planes != tuple(state.plane_ids):
        raise ConfigError(f"view planes {planes} do not match model planes {tuple(state.plane_ids)}")
    per_view = {}
    for v in views:
        x = np.asarray(v.pixels, dtype=state.dtype)[None, None]
        per_view[v.plane_id] = state.encode(v.plane_id, x, train=False)[0]
    vec = np.concatenate([per_view[p] for p in planes])
    return RepresentationRecord(view_set.lesion_id, per_view, vec, label)


def representation_matrix(state: ModelState, store: ViewStore, lesion_ids, chunk=128) -> np.ndarray:
    """Batched equivalent of ``concat_representations`` for many lesions, ``[n, M*d]``."""
    lesion_ids = list(lesion_ids)
    if not lesion_ids:
        raise EmptyDataError("no lesions to encode")
    rows = []
    for s in range(0, len(lesion_ids), chunk):
        batch = assemble_batch(store, lesion_ids[s:s + chunk], state.plane_ids, state.dtype)
        rows.append(np.concatenate([state.encode(p, x, train=False) for p, x in zip(state.plane_ids, batch)], axis=1))
    return np.concatenate(rows).astype(np.float64)


# -- heads ------------------------------------------------------------------

def _init_head(x, n_classes, rng, classes=()):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    w = rng.normal(0.0, 0.01, size=(n_classes, x.shape[1]))
    return HeadState(w, np.zeros(n_classes), mean, std, tuple(classes))


def _ce_grad(head, x, y):
    """Mean softmax cross-entropy and gradients w.r.t. head params and inputs."""
    xs = (x - head.mean) / head.std
    p = softmax(xs @ head.weight.T + head.bias)
    n = len(y)
    loss = -np.log(np.clip(p[np.arange(n), y], 1e-300, None)).mean()
    d = p.copy()
    d[np.arange(n), y] -= 1
    d /= n
    grads = {"weight": d.T @ xs, "bias": d.sum(axis=0)}
    dx = (d @ head.weight) / head.std
    return loss, grads, dx


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise EmptyDataError("no labelled samples")
    if len(np.unique(labels)) < 2:
        raise DataError("at least two classes must be present to train a classifier")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError("label index out of range")
    return labels


def train_linear_head(features, labels, n_classes=None, epochs=DEFAULT_HEAD_EPOCHS, lr=DEFAULT_HEAD_LR,
                      momentum=0.9, weight_decay=1e-4, batch_size=32, seed=0, state=None,
                      classes=(), on_epoch=None) -> HeadState:
    """Fit one fully connected softmax layer on frozen features.

    If ``state`` is given, the encoder parameters are hashed before and after;
    any change raises :class:`FrozenViolationError`. ``on_epoch`` is called
    with the epoch index after each epoch.
    """
    x = np.asarray(features, dtype=np.float64)
    n_classes = n_classes or int(np.max(labels)) + 1
    y = _check_labels(labels, n_classes)
    before = encoder_hash(state) if state is not None else None
    rng = np.random.default_rng(seed)
    head = _init_head(x, n_classes, rng, classes)
    params = {"weight": head.weight, "bias": head.bias}
    vel = {}
    bs = min(batch_size, len(y))
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        for s in range(0, len(y), bs):
            idx = order[s:s + bs]
            _, grads, _ = _ce_grad(head, x[idx], y[idx])
            sgd_step(params, grads, vel, lr, momentum, weight_decay)
        if on_epoch is not None:
            on_epoch(epoch)
    if state is not None and encoder_hash(state) != before:
        raise FrozenViolationError("encoder parameters changed during linear evaluation")
    return head


def fine_tune(state: ModelState, head, store: ViewStore, lesion_ids, labels, n_classes=None,
              epochs=20, lr=DEFAULT_FINETUNE_LR, momentum=0.9, weight_decay=1e-4, batch_size=32,
              seed=0, classes=(), warmup_epochs=DEFAULT_HEAD_EPOCHS, max_grad_norm=1.0):
    """Jointly update the encoders and a linear head on labelled lesions.

    Works on a copy of ``state``. With ``head=None`` a fresh head is first
    fitted on the frozen features for ``warmup_epochs``, then everything
    trains together. The encoder gradient is rescaled to at most
    ``max_grad_norm`` per step (``None`` disables it): the head divides by
    per-feature spreads, and near-constant features would otherwise receive
    huge gradients. Returns ``(state', head')``.
    """
    lesion_ids = list(lesion_ids)
    if not lesion_ids:
        raise EmptyDataError("fine-tuning subset is empty")
    n_classes = n_classes or int(np.max(labels)) + 1
    y = _check_labels(labels, n_classes)
    state = state.astype(state.dtype)
    state.velocity = {}
    rng = np.random.default_rng(seed)
    if head is None:
        head = train_linear_head(representation_matrix(state, store, lesion_ids), y, n_classes,
                                 warmup_epochs, DEFAULT_HEAD_LR, momentum, weight_decay, batch_size,
                                 seed, classes=classes)
        head.from_scratch = False
    else:
        head = HeadState(head.weight.copy(), head.bias.copy(), head.mean, head.std, head.classes, False)
    enc_params = state.encoder_parameters()
    head_params = {"weight": head.weight, "bias": head.bias}
    head_vel = {}
    bs = min(batch_size, len(y))
    d = state.encoder_config.output_dim
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for s in range(0, len(y), bs):
            idx = order[s:s + bs]
            batch = assemble_batch(store, [lesion_ids[k] for k in idx], state.plane_ids, state.dtype)
            feats = [state.encode(p, xb, train=True) for p, xb in zip(state.plane_ids, batch)]
            x = np.concatenate(feats, axis=1).astype(np.float64)
            _, hgrads, dx = _ce_grad(head, x, y[idx])
            for m, p in enumerate(state.plane_ids):
                state.encoders[p].backward(dx[:, m * d:(m + 1) * d].astype(state.dtype))
            grads = {k: g for k, g in state.grads().items() if k in enc_params}
            if max_grad_norm is not None:
                norm = np.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads.values()))
                if norm > max_grad_norm:
                    grads = {k: g * np.asarray(max_grad_norm / norm, dtype=g.dtype) for k, g in grads.items()}
            sgd_step(enc_params, grads, state.velocity, lr, momentum, weight_decay)
            sgd_step(head_params, hgrads, head_vel, lr, momentum, weight_decay)
    return state, head


# -- metrics ------------------------------------------------------------------

def auc_score(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def confusion(scores, labels, threshold=THRESHOLD):
    pred = np.asarray(scores) >= threshold
    y = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    return tp, tn, fp, fn


def binary_metrics(scores, labels, threshold=THRESHOLD) -> MetricReport:
    labels = np.asarray(labels)
    if not set(np.unique(labels)) <= {0, 1}:
        raise DataError("binary labels must be 0/1")
    tp, tn, fp, fn = confusion(scores, labels, threshold)
    if tp + fn == 0 or tn + fp == 0:
        raise UndefinedMetricError("AUC, sensitivity and specificity need both classes present")
    return MetricReport(
        auc=auc_score(scores, labels),
        sensitivity=tp / (tp + fn),
        specificity=tn / (tn + fp),
        accuracy=(tp + tn) / len(labels),
        precision=tp / (tp + fp) if tp + fp else 0.0,
        n_samples=int(len(labels)),
    )


def multiclass_accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if len(labels) == 0:
        raise EmptyDataError("no samples")
    return float(np.mean(preds == labels))


def one_vs_rest_auc(scores, labels) -> list:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise DataError("scores must be [n, C] with C >= 2")
    return [auc_score(scores[:, c], labels == c) for c in range(scores.shape[1])]


def multiclass_metrics(proba, labels) -> MetricReport:
    """Accuracy plus one-vs-rest AUC; threshold metrics are macro averages over classes."""
    proba, labels = np.asarray(proba), np.asarray(labels)
    preds = proba.argmax(axis=1)
    per_auc = one_vs_rest_auc(proba, labels)
    sens, spec, prec = [], [], []
    for c in range(proba.shape[1]):
        tp, tn, fp, fn = confusion(preds == c, labels == c, threshold=0.5)
        sens.append(tp / (tp + fn))
        spec.append(tn / (tn + fp))
        prec.append(tp / (tp + fp) if tp + fp else 0.0)
    return MetricReport(
        auc=float(np.mean(per_auc)),
        sensitivity=float(np.mean(sens)),
        specificity=float(np.mean(spec)),
        accuracy=multiclass_accuracy(preds, labels),
        precision=float(np.mean(prec)),
        n_samples=int(len(labels)),
        per_class_auc=per_auc,
    )


def evaluate_head(head: HeadState, features, labels) -> MetricReport:
    proba = head.predict_proba(np.asarray(features, dtype=np.float64))
    if proba.shape[1] == 2:
        return binary_metrics(proba[:, 1], labels)
    return multiclass_metrics(proba, labels)


# -- embedding geometry -------------------------------------------------------

@dataclass
class EmbeddingDiagnostics:
    within_mean: float
    between_mean: float
    gap: float
    pca: np.ndarray  # [M, N, 2]

    def to_dict(self):
        return {"within_mean": self.within_mean, "between_mean": self.between_mean, "gap": self.gap}


def embedding_diagnostics(z) -> EmbeddingDiagnostics:
    """Same-lesion vs cross-lesion cosine similarity of projections ``z[M, N, D]``."""
    z = np.asarray(z, dtype=np.float64)
    M, N, D = z.shape
    if M < 2 or N < 2:
        raise DataError("diagnostics need at least 2 views and 2 lesions")
    u = z / np.linalg.norm(z, axis=-1, keepdims=True)
    flat = u.reshape(M * N, D)
    sim = flat @ flat.T
    lesion = np.tile(np.arange(N), M)
    view = np.repeat(np.arange(M), N)
    upper = np.triu(np.ones_like(sim, dtype=bool), k=1)
    same = (lesion[:, None] == lesion[None, :]) & (view[:, None] != view[None, :]) & upper
    cross = (lesion[:, None] != lesion[None, :]) & upper
    within = float(sim[same].mean())
    between = float(sim[cross].mean())
    return EmbeddingDiagnostics(within, between, within - between, pca_2d(z.reshape(M * N, D)).reshape(M, N, 2))


def pca_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    # sign convention: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1, signs)[:, None]
    out = xc @ comps.T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def write_pca_csv(path, lesion_ids, plane_ids, coords) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lesion_id", "view_id", "x", "y"])
        for m, p in enumerate(plane_ids):
            for i, lid in enumerate(lesion_ids):
                w.writerow([lid, p, repr(float(coords[m, i, 0])), repr(float(coords[m, i, 1]))])
    return path
