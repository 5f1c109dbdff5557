"""Regressors: evidence-maximization Bayesian ridge and a small trained head.

Both are implemented from scratch on numpy. The ridge fit follows the
standard evidence approximation (iterated alpha/lambda updates on the SVD of
the centered design); the head is an input -> rectified hidden -> scalar
network trained with decoupled weight decay under a one-cycle schedule, with
analytic gradients verified against finite differences.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_BRR_MAGIC = b"BRR1"
_HEAD_MAGIC = b"HEAD"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# One-cycle shape: linear warmup over the first 30% of steps, cosine decay
# afterwards; both ends sit at max_lr / 25.
WARMUP_FRACTION = 0.3
LR_DIV_FACTOR = 25.0


class RegressionError(ValueError):
    """Raised for invalid regression inputs or malformed model files."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


def _as_design(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise RegressionError(f"need X (n,d) and y (n,), got {X.shape} and {y.shape}")
    if X.shape[0] < 2:
        raise RegressionError(f"need at least 2 rows, got {X.shape[0]}")
    if X.shape[1] < 1:
        raise RegressionError("need at least 1 feature column")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise RegressionError("non-finite values in training data")
    return X, y


# --- Bayesian ridge ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BayesianRidgeModel:
    weights: np.ndarray
    intercept: float
    alpha: float
    lambda_: float
    posterior_covariance: np.ndarray
    x_means: np.ndarray
    y_mean: float
    n_iterations_run: int
    converged: bool

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.lambda_ <= 0:
            raise RegressionError(f"precisions must be positive: alpha={self.alpha}, lambda={self.lambda_}")
        d = self.weights.shape[0]
        if self.posterior_covariance.shape != (d, d) or self.x_means.shape != (d,):
            raise RegressionError("inconsistent model dimensions")
        asym = np.max(np.abs(self.posterior_covariance - self.posterior_covariance.T), initial=0.0)
        if asym > 1e-10:
            raise RegressionError(f"posterior covariance asymmetric by {asym:.3e}")


def fit_bayesian_ridge(
    X: np.ndarray,
    y: np.ndarray,
    *,
    alpha_1: float = 1e-6,
    alpha_2: float = 1e-6,
    lambda_1: float = 1e-6,
    lambda_2: float = 1e-6,
    max_iter: int = 300,
    tol: float = 1e-3,
) -> BayesianRidgeModel:
    """Evidence-approximation fit.

    Center X and y, decompose centered X once, then alternate posterior-mean
    and precision updates until the max absolute weight change drops below
    tol. alpha is the noise precision, lambda the weight precision; the four
    hyperpriors are the Gamma parameters of their priors.
    """
    X, y = _as_design(X, y)
    n, d = X.shape
    x_means = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_means
    yc = y - y_mean

    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    s2 = s**2
    Uty = U.T @ yc

    var_y = float(yc.var())
    alpha = 1.0 / var_y if var_y > 0 else 1.0
    lam = 1.0

    def posterior_mean(alpha_: float, lam_: float) -> np.ndarray:
        return Vt.T @ (s / (s2 + lam_ / alpha_) * Uty)

    w = np.zeros(d)
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        w_old = w
        w = posterior_mean(alpha, lam)
        gamma = float(np.sum(s2 / (s2 + lam / alpha)))
        sse = float(np.sum((yc - Xc @ w) ** 2))
        lam = (gamma + 2.0 * lambda_1) / (float(w @ w) + 2.0 * lambda_2)
        alpha = (n - gamma + 2.0 * alpha_1) / (sse + 2.0 * alpha_2)
        if np.max(np.abs(w - w_old)) < tol:
            converged = True
            break

    w = posterior_mean(alpha, lam)  # weights must solve the system at the stored precisions
    cov = Vt.T @ (Vt / (alpha * s2 + lam)[:, None])
    if d > s.shape[0]:
        # Directions outside the row space see only the prior precision.
        cov = cov + (np.eye(d) - Vt.T @ Vt) / lam
    cov = (cov + cov.T) / 2.0
    return BayesianRidgeModel(
        weights=w,
        intercept=float(y_mean - x_means @ w),
        alpha=float(alpha),
        lambda_=float(lam),
        posterior_covariance=cov,
        x_means=x_means,
        y_mean=y_mean,
        n_iterations_run=n_iter,
        converged=converged,
    )


def predict_bayesian_ridge(model: BayesianRidgeModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and standard deviation per row."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.weights.shape[0]:
        raise RegressionError(f"expected {model.weights.shape[0]} columns, got shape {X.shape}")
    Xc = X - model.x_means
    mean = Xc @ model.weights + model.y_mean
    var = 1.0 / model.alpha + np.einsum("ij,jk,ik->i", Xc, model.posterior_covariance, Xc)
    return mean, np.sqrt(var)


def save_bayesian_ridge(model: BayesianRidgeModel, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    d = model.weights.shape[0]
    parts = [
        _BRR_MAGIC,
        struct.pack("<IIIB", 1, d, model.n_iterations_run, int(model.converged)),
        struct.pack("<dddd", model.alpha, model.lambda_, model.intercept, model.y_mean),
        model.weights.astype("<f8").tobytes(),
        model.x_means.astype("<f8").tobytes(),
        model.posterior_covariance.astype("<f8").tobytes(),
    ]
    p.write_bytes(b"".join(parts))


def load_bayesian_ridge(path: str | Path) -> BayesianRidgeModel:
    p = Path(path)
    data = p.read_bytes()
    if data[:4] != _BRR_MAGIC:
        raise RegressionError(f"{p}: bad magic {data[:4]!r}, expected {_BRR_MAGIC!r}")
    try:
        version, d, n_iter, converged = struct.unpack_from("<IIIB", data, 4)
        if version != 1:
            raise RegressionError(f"{p}: unsupported version {version}")
        alpha, lam, intercept, y_mean = struct.unpack_from("<dddd", data, 17)
    except struct.error as exc:
        raise RegressionError(f"{p}: truncated header: {exc}") from exc
    off = 17 + 32
    need = (2 * d + d * d) * 8
    payload = data[off:]
    if len(payload) != need:
        raise RegressionError(f"{p}: payload is {len(payload)} bytes, expected {need}")
    floats = np.frombuffer(payload, dtype="<f8")
    return BayesianRidgeModel(
        weights=floats[:d].copy(),
        intercept=intercept,
        alpha=alpha,
        lambda_=lam,
        posterior_covariance=floats[2 * d:].reshape(d, d).copy(),
        x_means=floats[d:2 * d].copy(),
        y_mean=y_mean,
        n_iterations_run=n_iter,
        converged=bool(converged),
    )


# --- trained head ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    max_lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise RegressionError(f"epochs must be >= 1, got {self.epochs}")
        if self.max_lr <= 0:
            raise RegressionError(f"max_lr must be positive, got {self.max_lr}")
        if self.weight_decay < 0:
            raise RegressionError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise RegressionError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise RegressionError(f"seed must be non-negative, got {self.seed}")


def one_cycle_lr(step: int, total_steps: int, max_lr: float) -> float:
    if total_steps < 1 or not 0 <= step < total_steps:
        raise RegressionError(f"step {step} outside schedule of {total_steps} steps")
    lo = max_lr / LR_DIV_FACTOR
    warmup = max(1, math.floor(WARMUP_FRACTION * total_steps))
    if step < warmup:
        return lo + (max_lr - lo) * (step / warmup)
    span = max(1, total_steps - 1 - warmup)
    progress = (step - warmup) / span
    return lo + (max_lr - lo) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True, eq=False)
class HeadModel:
    """input -> rectified hidden -> scalar regressor."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    config: TrainConfig
    final_train_mse: float

    def __post_init__(self) -> None:
        if self.w1.ndim != 2:
            raise RegressionError(f"w1 must be 2-D, got shape {self.w1.shape}")
        d, h = self.w1.shape
        if h < 1:
            raise RegressionError("hidden width 0 is unsupported: the head requires a rectified hidden layer")
        if self.b1.shape != (h,) or self.w2.shape != (h,):
            raise RegressionError("inconsistent layer shapes")
        for arr in (self.w1, self.b1, self.w2):
            if not np.all(np.isfinite(arr)):
                raise RegressionError("non-finite parameters")
        if not np.isfinite(self.b2):
            raise RegressionError("non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_width(self) -> int:
        return self.w1.shape[1]


@dataclass(frozen=True)
class TrainingTrace:
    losses: np.ndarray
    lrs: np.ndarray
    weight_norms: np.ndarray


def _forward(w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: float, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z1 = X @ w1 + b1
    a1 = np.maximum(z1, 0.0)
    return a1 @ w2 + b2, z1


def _mse_gradients(
    w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: float, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, float]:
    pred, z1 = _forward(w1, b1, w2, b2, X)
    a1 = np.maximum(z1, 0.0)
    resid = pred - y
    loss = float(resid @ resid) / X.shape[0]
    dpred = 2.0 * resid / X.shape[0]
    dw2 = a1.T @ dpred
    db2 = float(dpred.sum())
    dz1 = np.outer(dpred, w2) * (z1 > 0.0)
    dw1 = X.T @ dz1
    db1 = dz1.sum(axis=0)
    return loss, dw1, db1, dw2, db2


def _init_params(rng: np.random.Generator, d: int, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    # Scaled uniform fan-in init; biases start at zero. Draw order is part of
    # the determinism contract.
    w1 = rng.uniform(-1.0 / math.sqrt(d), 1.0 / math.sqrt(d), size=(d, h))
    w2 = rng.uniform(-1.0 / math.sqrt(h), 1.0 / math.sqrt(h), size=h)
    return w1, np.zeros(h), w2, 0.0


def fit_head(X: np.ndarray, y: np.ndarray, cfg: TrainConfig, hidden_width: int = 64) -> tuple[HeadModel, TrainingTrace]:
    """Minimize MSE with decoupled weight decay (weights only, never biases)
    under the one-cycle schedule. Bit-for-bit deterministic for a fixed cfg.

    Weight decay is applied alongside the adaptive-moment update rather than
    added to the loss; `grad_check` validates the loss-with-penalty gradient
    form instead.
    """
    X, y = _as_design(X, y)
    n, d = X.shape
    if hidden_width < 1:
        raise RegressionError("hidden width 0 is unsupported: the head requires a rectified hidden layer")
    rng = np.random.default_rng(cfg.seed)
    w1, b1, w2, b2 = _init_params(rng, d, hidden_width)

    n_batches = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    m_w1, v_w1 = np.zeros_like(w1), np.zeros_like(w1)
    m_b1, v_b1 = np.zeros_like(b1), np.zeros_like(b1)
    m_w2, v_w2 = np.zeros_like(w2), np.zeros_like(w2)
    m_b2 = v_b2 = 0.0

    losses = np.empty(total_steps)
    lrs = np.empty(total_steps)
    weight_norms = np.empty(total_steps)
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            loss, dw1, db1, dw2, db2 = _mse_gradients(w1, b1, w2, b2, X[batch], y[batch])
            lr = one_cycle_lr(step, total_steps, cfg.max_lr)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (epoch {epoch}, lr {lr:.3g})"
                )
            t = step + 1
            bc1 = 1.0 - ADAM_BETA1**t
            bc2 = 1.0 - ADAM_BETA2**t

            def adam(p, g, m, v, decay):
                m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
                v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
                update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
                if decay:
                    update = update + cfg.weight_decay * p
                return p - lr * update, m, v

            w1, m_w1, v_w1 = adam(w1, dw1, m_w1, v_w1, True)
            b1, m_b1, v_b1 = adam(b1, db1, m_b1, v_b1, False)
            w2, m_w2, v_w2 = adam(w2, dw2, m_w2, v_w2, True)
            b2, m_b2, v_b2 = adam(b2, db2, m_b2, v_b2, False)
            losses[step] = loss
            lrs[step] = lr
            weight_norms[step] = math.sqrt(float(np.sum(w1 * w1)) + float(np.sum(w2 * w2)))
            step += 1

    final_pred, _ = _forward(w1, b1, w2, float(b2), X)
    final_mse = float(np.mean((final_pred - y) ** 2))
    model = HeadModel(w1=w1, b1=b1, w2=w2, b2=float(b2), config=cfg, final_train_mse=final_mse)
    return model, TrainingTrace(losses=losses, lrs=lrs, weight_norms=weight_norms)


def predict_head(model: HeadModel, X: np.ndarray) -> np.ndarray:
    """Deterministic forward pass, clamped to [0, 1] for reporting."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise RegressionError(f"expected {model.input_dim} columns, got shape {X.shape}")
    pred, _ = _forward(model.w1, model.b1, model.w2, model.b2, X)
    return np.clip(pred, 0.0, 1.0)


def grad_check(model: HeadModel, X: np.ndarray, y: np.ndarray, epsilon: float = 1e-6) -> float:
    """Max relative disagreement between analytic and central finite-difference
    gradients of the MSE + 0.5*wd*||W||^2 loss, over every parameter."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    wd = model.config.weight_decay

    def loss_at(w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: float) -> float:
        pred, _ = _forward(w1, b1, w2, b2, X)
        mse = float(np.mean((pred - y) ** 2))
        return mse + 0.5 * wd * (float(np.sum(w1 * w1)) + float(np.sum(w2 * w2)))

    _, dw1, db1, dw2, db2 = _mse_gradients(model.w1, model.b1, model.w2, model.b2, X, y)
    analytic = {
        "w1": dw1 + wd * model.w1,
        "b1": db1,
        "w2": dw2 + wd * model.w2,
        "b2": np.array([db2]),
    }
    params = {
        "w1": model.w1.copy(),
        "b1": model.b1.copy(),
        "w2": model.w2.copy(),
        "b2": np.array([model.b2]),
    }

    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = loss_at(params["w1"], params["b1"], params["w2"], float(params["b2"][0]))
            flat[i] = orig - epsilon
            lo = loss_at(params["w1"], params["b1"], params["w2"], float(params["b2"][0]))
            flat[i] = orig
            gf = (hi - lo) / (2.0 * epsilon)
            rel = abs(ga[i] - gf) / max(1e-8, abs(ga[i]) + abs(gf))
            worst = max(worst, rel)
    return worst


def save_head(model: HeadModel, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    parts = [
        _HEAD_MAGIC,
        struct.pack("<IIIIIq", 1, model.input_dim, model.hidden_width, cfg.epochs, cfg.batch_size, cfg.seed),
        struct.pack("<dddd", cfg.max_lr, cfg.weight_decay, model.final_train_mse, model.b2),
        model.w1.astype("<f8").tobytes(),
        model.b1.astype("<f8").tobytes(),
        model.w2.astype("<f8").tobytes(),
    ]
    p.write_bytes(b"".join(parts))


def load_head(path: str | Path) -> HeadModel:
    p = Path(path)
    data = p.read_bytes()
    if data[:4] != _HEAD_MAGIC:
        raise RegressionError(f"{p}: bad magic {data[:4]!r}, expected {_HEAD_MAGIC!r}")
    try:
        version, d, h, epochs, batch_size, seed = struct.unpack_from("<IIIIIq", data, 4)
        if version != 1:
            raise RegressionError(f"{p}: unsupported version {version}")
        max_lr, weight_decay, final_mse, b2 = struct.unpack_from("<dddd", data, 32)
    except struct.error as exc:
        raise RegressionError(f"{p}: truncated header: {exc}") from exc
    off = 32 + 32
    need = (d * h + 2 * h) * 8
    payload = data[off:]
    if len(payload) != need:
        raise RegressionError(f"{p}: payload is {len(payload)} bytes, expected {need}")
    floats = np.frombuffer(payload, dtype="<f8")
    cfg = TrainConfig(epochs=epochs, max_lr=max_lr, weight_decay=weight_decay, batch_size=batch_size, seed=seed)
    return HeadModel(
        w1=floats[:d * h].reshape(d, h).copy(),
        b1=floats[d * h:d * h + h].copy(),
        w2=floats[d * h + h:].copy(),
        b2=b2,
        config=cfg,
        final_train_mse=final_mse,
    )
