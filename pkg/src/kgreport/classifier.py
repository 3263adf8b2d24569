"""Multi-label node classifier, long-tail metrics, and node-to-knowledge-text conversion."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.metrics import average_precision_score, roc_auc_score

from .checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from .corpus.graph import KnowledgeGraph, build_node_vocabulary
from .corpus.tokenizer import EMPTY, SEP
from .nn import Linear, Module, uniform_init
from .objectives import bce_loss
from .optim import AdamW
from .tensor import Tensor, conv2d, max_pool2d, no_grad, relu, sigmoid
from .validation import (
    N_NODES,
    check_images,
    check_is_fitted,
    check_label_matrix,
    check_probabilities,
    check_threshold,
)


class ConvBackbone(Module):
    """conv3x3 + relu + 2x2 max-pool per stage, then a linear head to one logit per node."""

    def __init__(self, image_side: int, in_channels: int, stages, n_out: int, rng, dtype):
        self.weights, self.biases = [], []
        c_in = in_channels
        for c_out in stages:
            fan_in = 9 * c_in
            self.weights.append(uniform_init(rng, (fan_in, c_out), fan_in, dtype))
            self.biases.append(uniform_init(rng, (c_out,), fan_in, dtype))
            c_in = c_out
        side = image_side // 2 ** len(stages)
        if side < 1:
            raise ValueError(f"{len(stages)} pooling stages do not fit a {image_side}px image")
        self.head = Linear(side * side * c_in, n_out, rng, dtype)

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}conv.{i}.weight"] = w
            out[f"{prefix}conv.{i}.bias"] = b
        out.update(self.head.named_parameters(prefix + "head."))
        return out

    def logits(self, x: Tensor) -> Tensor:
        for w, b in zip(self.weights, self.biases):
            x = max_pool2d(relu(conv2d(x, w, b)))
        return self.head(x.reshape(x.shape[0], -1))

    def __call__(self, x: Tensor) -> Tensor:
        return sigmoid(self.logits(x))


class NodeClassifier(BaseEstimator):
    """Small convnet predicting the 27 knowledge-graph nodes present in an image.

    Trained with the mean binary cross-entropy and AdamW. When ``fit`` gets an
    ``eval_set`` the weights from the epoch with the best validation aF1 are
    kept; ``history_`` holds one row per epoch.
    """

    def __init__(self, stages=(8, 16, 32), image_side: int = 32, channels: int = 1,
                 epochs: int = 30, batch_size: int = 16, lr: float = 1e-3,
                 weight_decay: float = 5e-5, threshold: float = 0.5, seed: int = 0,
                 dtype: str = "float32"):
        self.stages = stages
        self.image_side = image_side
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.threshold = threshold
        self.seed = seed
        self.dtype = dtype

    def _build(self) -> ConvBackbone:
        rng = np.random.default_rng(self.seed)
        return ConvBackbone(self.image_side, self.channels, tuple(self.stages), N_NODES, rng,
                            np.dtype(self.dtype))

    def init_network(self) -> "NodeClassifier":
        """Build untrained weights (useful for inspection and smoke tests)."""
        self.network_ = self._build()
        self.history_ = []
        return self

    def fit(self, X, Y, eval_set=None, log=None):
        X = check_images(X, self.image_side, self.channels)
        Y = check_label_matrix(Y, len(X))
        check_threshold(self.threshold)
        self.network_ = net = self._build()
        params = net.parameters()
        opt = AdamW(params, lr=self.lr, weight_decay=self.weight_decay)
        rng = np.random.default_rng([self.seed, 1])
        dt = np.dtype(self.dtype)
        self.history_ = []
        best, best_state = -np.inf, None
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(len(X))
            losses = []
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                opt.zero_grad()
                loss = bce_loss(net(Tensor(X[idx].astype(dt))), Y[idx])
                loss.backward()
                opt.step()
                losses.append(float(loss.data) * len(idx))
            row = {"epoch": epoch, "train_bce": sum(losses) / len(X)}
            if eval_set is not None:
                m = compute_multilabel_metrics(self.predict_proba(eval_set[0]), eval_set[1],
                                               self.threshold)
                row.update({f"val_{k}": v for k, v in m.as_dict().items()})
                if m.aF1 > best:
                    best = m.aF1
                    best_state = [p.data.copy() for p in params]
                    self.best_epoch_ = epoch
            self.history_.append(row)
            if log is not None:
                log(row)
        if best_state is not None:
            for p, saved in zip(params, best_state):
                p.data[...] = saved
        return self

    def predict_proba(self, X, batch_size: int = 256) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_images(X, self.image_side, self.channels)
        dt = np.dtype(self.dtype)
        out = []
        with no_grad():
            for start in range(0, len(X), batch_size):
                out.append(self.network_(Tensor(X[start:start + batch_size].astype(dt))).data)
        return np.concatenate(out).astype(np.float64)

    def predict(self, X) -> np.ndarray:
        return threshold_to_labels(self.predict_proba(X), self.threshold)

    def score(self, X, Y) -> float:
        """Macro F1 at the configured threshold."""
        return compute_multilabel_metrics(self.predict_proba(X), Y, self.threshold).aF1

    def save(self, path):
        check_is_fitted(self, "network_")
        return save_checkpoint(path, self.network_.named_parameters(), "node-classifier",
                               self.get_params())

    @classmethod
    def load(cls, path) -> "NodeClassifier":
        meta, arrays = read_checkpoint(path)
        if meta["kind"] != "node-classifier":
            raise CheckpointError(f"{path} holds a {meta['kind']!r}, not a node classifier")
        cfg = dict(meta["config"])
        cfg["stages"] = tuple(cfg["stages"])
        clf = cls(**cfg).init_network()
        load_into(clf.network_.named_parameters(), arrays)
        return clf


def classify_nodes(image, classifier: NodeClassifier) -> np.ndarray:
    """27 sigmoid probabilities for one image (or one row per image for a batch)."""
    X = np.asarray(image)
    single = X.ndim <= 3
    P = classifier.predict_proba(X)
    return P[0] if single else P


def threshold_to_labels(probabilities, t: float = 0.5) -> np.ndarray:
    check_threshold(t)
    return (np.asarray(probabilities) >= t).astype(np.int8)


@dataclass
class ClassifierMetrics:
    aAUC: float
    aF1: float
    aACC: float
    mAP: float
    n_excluded: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _f1(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = int(np.sum(pred & truth))
    denom = int(pred.sum() + truth.sum())
    return 2.0 * tp / denom if denom else 0.0


def compute_multilabel_metrics(probabilities, labels, threshold: float = 0.5) -> ClassifierMetrics:
    """Macro aAUC / aF1 / mAP over labels with both classes present; micro aACC.

    Labels whose column is all-0 or all-1 are left out of the three macro
    averages and counted in ``n_excluded``.
    """
    P = check_probabilities(probabilities)
    Y = check_label_matrix(labels, len(P))
    if len(P) < 2:
        raise ValueError("multilabel metrics need at least two samples")
    pred = threshold_to_labels(P, threshold).astype(bool)
    truth = Y.astype(bool)
    aacc = float(np.mean(pred == truth))
    keep = [j for j in range(Y.shape[1]) if 0 < Y[:, j].sum() < len(Y)]
    if not keep:
        raise ValueError("no label has both classes present")
    aauc = float(np.mean([roc_auc_score(Y[:, j], P[:, j]) for j in keep]))
    amap = float(np.mean([average_precision_score(Y[:, j], P[:, j]) for j in keep]))
    af1 = float(np.mean([_f1(pred[:, j], truth[:, j]) for j in keep]))
    return ClassifierMetrics(aauc, af1, aacc, amap, Y.shape[1] - len(keep))


def nodes_to_knowledge_text(labels, graph: KnowledgeGraph | None = None) -> str:
    """Positive node names in graph order joined by [SEP]; no positives gives [MASK-NEG]."""
    graph = graph or build_node_vocabulary()
    names = graph.labels_to_names(labels)
    return f" {SEP} ".join(names) if names else EMPTY


__all__ = ["NodeClassifier", "ConvBackbone", "ClassifierMetrics", "classify_nodes",
           "threshold_to_labels", "compute_multilabel_metrics", "nodes_to_knowledge_text"]
