"""Walking and editing in code space, and linear probes on codes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special, stats

from .errors import DataError, DegenerateClassifierError, ShapeError
from .latent import LatentCode


def _as_vector(z) -> np.ndarray:
    if isinstance(z, LatentCode):
        z = z.values
    if hasattr(z, "detach"):
        z = z.detach().cpu().numpy()
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2 and z.shape[0] == 1:
        z = z[0]
    if z.ndim != 1:
        raise ShapeError(f"expected a single code vector, got shape {z.shape}")
    return z


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def interpolate_discrete(z_src, z_tgt, rng=None) -> list[np.ndarray]:
    """Flip the disagreeing bits of ``z_src`` one at a time, in random order, until it becomes ``z_tgt``.

    Returns Hamming(z_src, z_tgt) + 1 codes, endpoints included.
    """
    a, b = _as_vector(z_src), _as_vector(z_tgt)
    if a.shape != b.shape:
        raise ShapeError(f"code lengths differ: {a.size} vs {b.size}")
    order = _rng(rng).permutation(np.flatnonzero(a != b))
    path = [a.copy()]
    cur = a.copy()
    for j in order:
        cur = cur.copy()
        cur[j] = b[j]
        path.append(cur)
    return path


@dataclass
class LinearProbe:
    """Multinomial logistic classifier: scores = z @ W + b."""

    W: np.ndarray  # (n, k)
    b: np.ndarray  # (k,)
    classes: Optional[np.ndarray] = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"W {self.W.shape} and b {self.b.shape} are inconsistent")
        if self.W.shape[1] < 2:
            raise DataError("a probe needs at least two classes")
        if self.classes is None:
            self.classes = np.arange(self.k)

    @property
    def k(self) -> int:
        return self.W.shape[1]

    def scores(self, codes) -> np.ndarray:
        return np.asarray(codes, dtype=np.float64) @ self.W + self.b

    def predict_proba(self, codes) -> np.ndarray:
        return special.softmax(self.scores(codes), axis=1)

    def predict(self, codes) -> np.ndarray:
        return self.classes[np.argmax(self.scores(codes), axis=1)]

    def to_rows(self) -> list[dict]:
        """Tabular form: one row per class with bias and weights."""
        return [{"class": int(c), "bias": float(self.b[j]),
                 **{f"w{i}": float(self.W[i, j]) for i in range(self.W.shape[0])}}
                for j, c in enumerate(self.classes)]

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "LinearProbe":
        n = sum(1 for k in rows[0] if k.startswith("w"))
        W = np.array([[r[f"w{i}"] for r in rows] for i in range(n)])
        return cls(W, np.array([r["bias"] for r in rows]), np.array([r["class"] for r in rows]))


def decision_value(probe: LinearProbe, z) -> float:
    """g(z) = (w_1 - w_2) . z + b_1 - b_2 for a two-class probe."""
    n, c = _boundary(probe)
    return float(n @ _as_vector(z) + c)


def _boundary(probe: LinearProbe) -> tuple[np.ndarray, float]:
    if probe.k != 2:
        raise DataError(f"classifier translation needs a two-class probe, got k={probe.k}")
    return probe.W[:, 0] - probe.W[:, 1], float(probe.b[0] - probe.b[1])


def classifier_translate(z, probe: LinearProbe, deltas: Sequence[float], binarize: bool = False) -> list[np.ndarray]:
    """Move ``z`` along the boundary normal: z + delta * v, v = (g(z) / |n|^2) n.

    delta = -1 lands exactly on the decision boundary; delta < -1 crosses it.
    With ``binarize`` each result is thresholded at 0.5 (a tie maps to 0).
    """
    z = _as_vector(z)
    n, c = _boundary(probe)
    if n.shape != z.shape:
        raise ShapeError(f"probe has {n.size} weights, code has {z.size} bits")
    nn2 = float(n @ n)
    if nn2 == 0.0:
        raise DegenerateClassifierError("classifier normal vector is zero")
    v = (n @ z + c) / nn2 * n
    out = []
    for d in deltas:
        zi = z + float(d) * v
        out.append((zi > 0.5).astype(np.float64) if binarize else zi)
    return out


# ---------------------------------------------------------------- probe fitting


def fit_logistic(X: np.ndarray, y: np.ndarray, k: int, l2: float = 1e-4, max_iter: int = 1000) -> LinearProbe:
    """Full-batch L-BFGS on mean cross-entropy + (l2 / 2) |W|^2; biases are not penalised."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[1]
    Y = np.eye(k)[y]

    def objective(theta):
        W, b = theta[: n * k].reshape(n, k), theta[n * k:]
        S = X @ W + b
        logZ = special.logsumexp(S, axis=1)
        loss = np.mean(logZ - np.sum(S * Y, axis=1)) + 0.5 * l2 * np.sum(W * W)
        G = (np.exp(S - logZ[:, None]) - Y) / X.shape[0]
        return loss, np.concatenate([(X.T @ G + l2 * W).ravel(), G.sum(0)])

    res = optimize.minimize(objective, np.zeros(n * k + k), jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "gtol": 1e-8})
    return LinearProbe(res.x[: n * k].reshape(n, k), res.x[n * k:])


def auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney estimate of the area under the ROC curve (ties count half)."""
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = stats.rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def split_indices(count: int, rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)):
    perm = rng.permutation(count)
    n_tr = int(round(fractions[0] * count))
    n_va = int(round(fractions[1] * count))
    return perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:]


def fit_linear_probe(codes, labels, split_seed: int = 0, n_splits: int = 5, l2: float = 1e-4):
    """Logistic probe evaluated over ``n_splits`` random 8:1:1 splits.

    Returns ``(probe, metrics)``. ``probe`` is refitted on all codes;
    ``metrics`` holds mean/std test accuracy, per-split values, validation
    accuracy and, for two classes, the mean test AUROC.
    """
    X = _as_matrix(codes)
    labels = np.asarray(labels)
    if labels.shape != (X.shape[0],):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {X.shape[0]} codes")
    classes, y = np.unique(labels, return_inverse=True)
    k = len(classes)
    if k < 2:
        raise DataError("labels contain a single class; a probe needs at least two")
    if X.shape[0] < 10:
        raise DataError("need at least 10 labelled codes for an 8:1:1 split")
    rng = np.random.default_rng(split_seed)
    accs, val_accs, aucs = [], [], []
    for _ in range(n_splits):
        tr, va, te = split_indices(X.shape[0], rng)
        probe = fit_logistic(X[tr], y[tr], k, l2)
        accs.append(float(np.mean(np.argmax(probe.scores(X[te]), 1) == y[te])))
        val_accs.append(float(np.mean(np.argmax(probe.scores(X[va]), 1) == y[va])))
        if k == 2:
            s = probe.scores(X[te])
            aucs.append(auroc(s[:, 1] - s[:, 0], y[te] == 1))
    final = fit_logistic(X, y, k, l2)
    final.classes = classes
    metrics = {
        "test_accuracy": float(np.mean(accs)),
        "test_accuracy_std": float(np.std(accs)),
        "val_accuracy": float(np.mean(val_accs)),
        "split_accuracies": accs,
        "n_classes": k,
        "n_codes": int(X.shape[0]),
        "chance": float(np.max(np.bincount(y)) / len(y)),
    }
    if k == 2:
        metrics["test_auroc"] = float(np.nanmean(aucs))
    return final, metrics


def _as_matrix(codes) -> np.ndarray:
    if isinstance(codes, LatentCode):
        codes = codes.values
    if hasattr(codes, "detach"):
        codes = codes.detach().cpu().numpy()
    X = np.asarray(codes, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("codes must be a nonempty (count, n_bits) array")
    return X
