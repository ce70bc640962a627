"""Input validation shared by the estimators and attacks."""
import numpy as np
from sklearn.utils.validation import check_array


def check_inputs(X, n_features=None):
    """2-D float64 array of finite inputs with the expected width."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, copy=False)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, model expects {n_features}")
    return X


def check_targets(Y, tasks, n_samples):
    """Validate a ``{task_id: targets}`` mapping against task specs."""
    if not isinstance(Y, dict):
        raise TypeError("targets must be a dict mapping task id to an array")
    out = {}
    for t in tasks:
        if t.id not in Y:
            raise ValueError(f"missing targets for task {t.id!r}")
        y = np.asarray(Y[t.id])
        if y.shape[0] != n_samples:
            raise ValueError(f"task {t.id!r}: {y.shape[0]} targets for {n_samples} inputs")
        if t.kind == "classification":
            if y.ndim != 1:
                raise ValueError(f"task {t.id!r}: class labels must be 1-D")
            if np.any(y != np.round(y)) or np.any(y < 0) or np.any(y >= t.target_dim):
                raise ValueError(f"task {t.id!r}: labels must be integers in [0, {t.target_dim})")
            out[t.id] = y.astype(np.int64)
        else:
            y = y.astype(np.float64).reshape(n_samples, -1)
            if y.shape[1] != t.target_dim:
                raise ValueError(f"task {t.id!r}: target width {y.shape[1]} != {t.target_dim}")
            if not np.all(np.isfinite(y)):
                raise ValueError(f"task {t.id!r}: non-finite targets")
            out[t.id] = y
    return out
