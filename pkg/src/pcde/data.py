"""Covariate/response sample container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Dataset:
    """``n`` covariate/response pairs ``(X_i, Y_i)``.

    ``labels`` optionally records the mixture component each response was drawn
    from (simulated data only); ``grid_shape`` records ``(height, width)`` when
    the sample comes from an image cube, rows being in row-major pixel order.
    """

    X: np.ndarray
    Y: np.ndarray
    labels: np.ndarray | None = None
    grid_shape: tuple | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] != Y.shape[0]:
            raise ValueError("X and Y must have the same number of rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d_x(self) -> int:
        return self.X.shape[1]

    @property
    def d_y(self) -> int:
        return self.Y.shape[1]

    def subset(self, rows) -> "Dataset":
        labels = None if self.labels is None else self.labels[rows]
        return Dataset(self.X[rows], self.Y[rows], labels)
