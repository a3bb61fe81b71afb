"""Soft-margin kernel SVM on extracted feature vectors.

Dual training by sequential minimal optimization with maximal-violating-pair
working-set selection, a linear or RBF kernel, and CSV feature files as the
interchange format with the feature extractor. Labels are {0, 1} at the
interface (stressed = 1) and {-1, +1} internally.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


class ConvergenceError(RuntimeError):
    """SMO ran out of iterations; ``model`` holds the best iterate."""

    def __init__(self, message, model):
        super().__init__(message)
        self.model = model


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"  # "linear" | "rbf"
    gamma: float | str = "scale"  # rbf only; "scale" resolves to 1/(d * Var(X)) at fit

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and not isinstance(self.gamma, str):
            if self.gamma <= 0:
                raise ValueError(f"rbf gamma must be positive, got {self.gamma}")
        if isinstance(self.gamma, str) and self.gamma != "scale":
            raise ValueError(f"gamma must be a number or 'scale', got {self.gamma!r}")


@dataclass
class SvmTrainConfig:
    C: float = 1.0
    tol: float = 1e-3
    max_iter: int = 100_000
    kernel: KernelSpec = field(default_factory=KernelSpec)
    seed: int = 0  # reserved; maximal-violation selection is deterministic

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("C must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class SvmModel:
    """Trained classifier: support vectors, alpha_i * y_i, bias, kernel."""

    support_vectors: np.ndarray  # [m, d]
    dual_coef: np.ndarray        # [m] entries alpha_i * y_i
    bias: float
    kernel: KernelSpec           # gamma always resolved to a number


def _resolve_gamma(spec: KernelSpec, X: np.ndarray) -> KernelSpec:
    if spec.kind != "rbf" or not isinstance(spec.gamma, str):
        return spec
    var = float(X.var())
    gamma = 1.0 / (X.shape[1] * var) if var > 0 else 1.0
    return KernelSpec("rbf", gamma)


def kernel_eval(x, z, spec: KernelSpec) -> float:
    """Kernel value for two feature vectors."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ValueError(f"feature dims differ: {x.shape} vs {z.shape}")
    if spec.kind == "linear":
        return float(x @ z)
    diff = x - z
    return float(np.exp(-spec.gamma * (diff @ diff)))


def _kernel_matrix(X: np.ndarray, Z: np.ndarray, spec: KernelSpec) -> np.ndarray:
    if spec.kind == "linear":
        return X @ Z.T
    sq = (X * X).sum(axis=1)[:, None] + (Z * Z).sum(axis=1)[None, :] - 2.0 * (X @ Z.T)
    return np.exp(-spec.gamma * np.maximum(sq, 0.0))


def train(X, y, config: SvmTrainConfig | None = None) -> SvmModel:
    """Fit the dual problem by SMO until the KKT gap falls below tol.

    X is [n, d], y is {0, 1}. Each iteration picks the maximal violating
    pair (one index from the upper-feasible set, one from the lower), solves
    the two-variable subproblem analytically and updates the cached dual
    gradient. The equality constraint sum(alpha_i y_i) = 0 is preserved by
    construction.
    """
    config = config or SvmTrainConfig()
    X = np.asarray(X, dtype=np.float64)
    y01 = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y01.shape[0]:
        raise ValueError(f"feature matrix {X.shape} does not match {y01.shape[0]} labels")
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two training points")
    if set(np.unique(y01)) != {0, 1}:
        raise ValueError("training labels must include both classes {0, 1}")
    yy = np.where(y01 == 1, 1.0, -1.0)
    spec = _resolve_gamma(config.kernel, X)
    K = _kernel_matrix(X, X, spec)
    C, tol = config.C, config.tol

    alpha = np.zeros(n)
    # crit_i = y_i - f_nobias(x_i) = -y_i * grad of the minimisation form
    crit = yy.copy()

    def build_model():
        keep = alpha > 1e-10
        return SvmModel(support_vectors=X[keep].copy(),
                        dual_coef=(alpha * yy)[keep],
                        bias=float(b), kernel=spec)

    b = 0.0
    for _ in range(config.max_iter):
        up = ((yy > 0) & (alpha < C)) | ((yy < 0) & (alpha > 0))
        low = ((yy > 0) & (alpha > 0)) | ((yy < 0) & (alpha < C))
        i = int(np.flatnonzero(up)[np.argmax(crit[up])])
        j = int(np.flatnonzero(low)[np.argmin(crit[low])])
        gap = crit[i] - crit[j]
        if gap <= tol:
            b = _bias(alpha, yy, crit, C, float(crit[i]), float(crit[j]))
            return build_model()
        quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
        room_i = C - alpha[i] if yy[i] > 0 else alpha[i]
        room_j = alpha[j] if yy[j] > 0 else C - alpha[j]
        lam = min(room_i, room_j, gap / max(quad, 1e-12))
        alpha[i] += yy[i] * lam
        alpha[j] -= yy[j] * lam
        crit -= lam * (K[i] - K[j])

    b = _bias(alpha, yy, crit, C, float(crit[i]), float(crit[j]))
    raise ConvergenceError(
        f"SMO did not reach tol={tol} within {config.max_iter} iterations "
        f"(KKT gap {gap:.3e})", build_model())


def _bias(alpha, yy, crit, C, crit_up, crit_low) -> float:
    free = (alpha > 1e-10) & (alpha < C - 1e-10)
    if free.any():
        return float(crit[free].mean())
    return (crit_up + crit_low) / 2.0


def decision_function(model: SvmModel, x) -> float:
    """Signed distance-like score; positive means stressed."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.support_vectors.shape[1]:
        raise ValueError(
            f"feature dim {x.shape} does not match model dim "
            f"({model.support_vectors.shape[1]},)")
    k = _kernel_matrix(model.support_vectors, x[None], model.kernel)[:, 0]
    return float(model.dual_coef @ k + model.bias)


def decision_scores(model: SvmModel, X) -> np.ndarray:
    """Vectorized decision_function over the rows of X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.support_vectors.shape[1]:
        raise ValueError(
            f"feature matrix {X.shape} does not match model dim "
            f"({model.support_vectors.shape[1]},)")
    K = _kernel_matrix(X, model.support_vectors, model.kernel)
    return K @ model.dual_coef + model.bias


def predict(model: SvmModel, x) -> int:
    """1 iff the decision function is strictly positive (ties to healthy)."""
    return 1 if decision_function(model, x) > 0.0 else 0


def predict_many(model: SvmModel, X) -> np.ndarray:
    return (decision_scores(model, X) > 0.0).astype(int)


# ---------------------------------------------------------------------------
# feature and model files


def write_features(X, y, path) -> None:
    """CSV with header f0..f{d-1},label; floats carry 17 significant digits."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"feature matrix {X.shape} does not match {y.shape[0]} labels")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(X.shape[1])] + ["label"])
        for row, label in zip(X, y):
            writer.writerow([f"{v:.17g}" for v in row] + [int(label)])


def read_features(path):
    """Inverse of write_features; raises with the 1-based line number on bad rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty feature file") from None
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if header != expected or d < 1:
            raise ValueError(f"{path}: line 1: bad header {header!r}")
        rows, labels = [], []
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != d + 1:
                raise ValueError(
                    f"{path}: line {lineno}: expected {d + 1} cells, got {len(cells)}")
            try:
                rows.append([float(c) for c in cells[:-1]])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric feature cell") from None
            if cells[-1] not in ("0", "1"):
                raise ValueError(f"{path}: line {lineno}: label must be 0 or 1, got {cells[-1]!r}")
            labels.append(int(cells[-1]))
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=int)


def save_model(model: SvmModel, path) -> None:
    """Versioned JSON record of the trained classifier."""
    payload = {
        "format": "svm-model",
        "version": 1,
        "kernel": {"kind": model.kernel.kind, "gamma": model.kernel.gamma},
        "bias": model.bias,
        "dual_coef": model.dual_coef.tolist(),
        "support_vectors": model.support_vectors.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_model(path) -> SvmModel:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "svm-model" or payload.get("version") != 1:
        raise ValueError(f"{path}: not a version-1 svm-model file")
    kernel = payload["kernel"]
    return SvmModel(
        support_vectors=np.array(payload["support_vectors"], dtype=np.float64),
        dual_coef=np.array(payload["dual_coef"], dtype=np.float64),
        bias=float(payload["bias"]),
        kernel=KernelSpec(kernel["kind"], kernel["gamma"]),
    )


def dual_objective(X, y01, alpha_y, spec: KernelSpec) -> float:
    """W(alpha) = sum(alpha) - 0.5 * sum_ij alpha_i alpha_j y_i y_j K_ij.

    ``alpha_y`` carries alpha_i * y_i rows aligned with X; used by tests to
    compare against brute-force maximization.
    """
    X = np.asarray(X, dtype=np.float64)
    yy = np.where(np.asarray(y01) == 1, 1.0, -1.0)
    alpha = np.asarray(alpha_y) * yy
    K = _kernel_matrix(X, X, spec)
    return float(alpha.sum() - 0.5 * alpha_y @ K @ alpha_y)
