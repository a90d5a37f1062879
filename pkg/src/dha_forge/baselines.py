"""TF-IDF features and a softmax-regression comparator."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import torch

from .labels import N_CLASSES
from .metrics import ShapeError
from .model import softmax


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class TfidfModel:
    terms: tuple[str, ...]
    idf: np.ndarray
    n_docs: int

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.terms)})

    @property
    def index(self) -> dict[str, int]:
        return self._index

    def to_json(self) -> dict:
        return {"terms": list(self.terms), "idf": [float(v) for v in self.idf], "N": self.n_docs}

    @classmethod
    def from_json(cls, data: dict) -> "TfidfModel":
        return cls(tuple(data["terms"]), np.asarray(data["idf"], dtype=np.float64), int(data["N"]))


def tfidf_fit(corpus: Sequence[str]) -> TfidfModel:
    """Smoothed idf(t) = ln((1 + N) / (1 + df(t))) + 1 over whitespace tokens."""
    if len(corpus) == 0:
        raise FitError("cannot fit TF-IDF on an empty corpus")
    df: Counter[str] = Counter()
    for doc in corpus:
        df.update(set(doc.split()))
    terms = tuple(sorted(df))
    n = len(corpus)
    idf = np.array([math.log((1 + n) / (1 + df[t])) + 1.0 for t in terms], dtype=np.float64)
    return TfidfModel(terms, idf, n)


def tfidf_transform(doc: str, model: TfidfModel) -> dict[int, float]:
    """Sparse L2-normalised tf * idf vector as ``{term index: weight}``."""
    counts = Counter(t for t in doc.split() if t in model.index)
    weights = {model.index[t]: c * float(model.idf[model.index[t]]) for t, c in counts.items()}
    norm = math.sqrt(sum(w * w for w in weights.values()))
    if norm == 0.0:
        return {}
    return {i: w / norm for i, w in sorted(weights.items())}


def tfidf_matrix(docs: Sequence[str], model: TfidfModel) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for r, doc in enumerate(docs):
        for c, v in tfidf_transform(doc, model).items():
            rows.append(r)
            cols.append(c)
            vals.append(v)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(docs), len(model.terms)), dtype=np.float64)


@dataclass
class LinearConfig:
    seed: int = 0
    steps: int = 300
    learning_rate: float = 0.05
    # L2 strengths tried; the one with the best held-out accuracy is kept
    l2_grid: tuple[float, ...] = (0.0, 1e-4, 1e-3, 1e-2)


@dataclass
class LinearClassifier:
    weight: np.ndarray  # (7, V)
    bias: np.ndarray  # (7,)
    l2: float = 0.0
    meta: dict = field(default_factory=dict)

    def predict(self, vectors) -> np.ndarray:
        """Class distributions, one row per input row."""
        x = _as_dense(vectors)
        if x.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"expected {self.weight.shape[1]} features, got {x.shape[1]}")
        return softmax(x @ self.weight.T + self.bias)

    def to_json(self) -> dict:
        return {"weight": self.weight.tolist(), "bias": self.bias.tolist(), "l2": self.l2,
                "meta": self.meta}

    @classmethod
    def from_json(cls, data: dict) -> "LinearClassifier":
        return cls(np.asarray(data["weight"], dtype=np.float64),
                   np.asarray(data["bias"], dtype=np.float64), data.get("l2", 0.0),
                   data.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")


def _as_dense(vectors) -> np.ndarray:
    if sp.issparse(vectors):
        return vectors.toarray()
    x = np.asarray(vectors, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


def _fit_one(x: np.ndarray, y: np.ndarray, l2: float, cfg: LinearConfig) -> LinearClassifier:
    torch.manual_seed(cfg.seed)
    xt = torch.as_tensor(x, dtype=torch.float64)
    yt = torch.as_tensor(y, dtype=torch.long)
    w = torch.zeros(N_CLASSES, x.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros(N_CLASSES, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.AdamW([w, b], lr=cfg.learning_rate, weight_decay=0.0)
    for _ in range(cfg.steps):
        loss = torch.nn.functional.cross_entropy(xt @ w.T + b, yt) + l2 * (w * w).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return LinearClassifier(w.detach().numpy().copy(), b.detach().numpy().copy(), l2)


def linear_fit(vectors, labels: Sequence[int], cfg: LinearConfig | None = None,
               eval_vectors=None, eval_labels: Sequence[int] | None = None) -> LinearClassifier:
    """Full-batch softmax regression trained with AdamW.

    With an evaluation set, every L2 strength in ``cfg.l2_grid`` is fitted and
    the most accurate on that set is returned; otherwise the first is used.
    """
    cfg = cfg or LinearConfig()
    x = _as_dense(vectors)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"{x.shape[0]} vectors but {y.shape[0]} labels")
    if x.shape[0] == 0:
        raise FitError("cannot fit on an empty training set")
    grid = cfg.l2_grid if eval_vectors is not None else cfg.l2_grid[:1]
    best, best_acc = None, -1.0
    for l2 in grid:
        clf = _fit_one(x, y, l2, cfg)
        if eval_vectors is None:
            return clf
        acc = float((clf.predict(eval_vectors).argmax(1) == np.asarray(eval_labels)).mean())
        if acc > best_acc:
            best, best_acc = clf, acc
    best.meta = {"eval_accuracy": best_acc, "l2_grid": list(grid)}
    return best


def linear_predict(clf: LinearClassifier, vector) -> np.ndarray:
    """Distribution for a single vector (dict, dense row or sparse row)."""
    if isinstance(vector, dict):
        dense = np.zeros(clf.weight.shape[1])
        for i, v in vector.items():
            dense[i] = v
        vector = dense
    return clf.predict(vector)[0]
