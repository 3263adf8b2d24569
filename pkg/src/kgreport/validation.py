"""Input checks shared by the estimators and the pipeline."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, ContractError

N_NODES = 27


def check_images(X, side: int | None = None, channels: int | None = None) -> np.ndarray:
    """Return X as a float array of shape (n, H, W, C); a single image gets a batch axis."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None, :, :, None]
    elif X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ContractError(f"expected images shaped (n, H, W, C), got {X.shape}")
    if side is not None and X.shape[1:3] != (side, side):
        raise ContractError(f"expected {side}x{side} images, got {X.shape[1]}x{X.shape[2]}")
    if channels is not None and X.shape[3] != channels:
        raise ContractError(f"expected {channels} channel(s), got {X.shape[3]}")
    if not np.all(np.isfinite(X)):
        raise ContractError("images contain non-finite values")
    return X


def check_label_matrix(Y, n_rows: int | None = None, width: int = N_NODES) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.ndim == 1:
        Y = Y[None]
    if Y.ndim != 2 or Y.shape[1] != width:
        raise ContractError(f"expected labels shaped (n, {width}), got {Y.shape}")
    if not np.isin(Y, (0, 1)).all():
        raise ContractError("labels must be 0/1")
    if n_rows is not None and Y.shape[0] != n_rows:
        raise ContractError(f"{Y.shape[0]} label rows for {n_rows} samples")
    return Y.astype(np.int8)


def check_probabilities(P, width: int = N_NODES) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim == 1:
        P = P[None]
    if P.ndim != 2 or P.shape[1] != width:
        raise ContractError(f"expected probabilities shaped (n, {width}), got {P.shape}")
    if np.any(~np.isfinite(P)) or P.min() < 0 or P.max() > 1:
        raise ContractError("probabilities must lie in [0, 1]")
    return P


def check_threshold(t: float) -> float:
    if not 0.0 < t < 1.0:
        raise ContractError(f"threshold must be in (0, 1), got {t}")
    return float(t)


def check_accuracies(values) -> list:
    out = sorted({float(a) for a in values})
    if not out:
        raise ConfigError("no accuracy levels given")
    bad = [a for a in out if not 0.0 < a <= 1.0]
    if bad:
        raise ConfigError(f"accuracy levels must be in (0, 1]: {bad}")
    return out


def check_is_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise ContractError(f"{type(estimator).__name__} is not fitted; call fit() first")
