"""Pure numpy/scipy versions of the compiled IRLS kernels.

Same signatures and semantics as ``_kernels.pyx``.
"""
import numpy as np
from scipy import sparse
from scipy.special import expit


def _design(active: np.ndarray, k: int) -> sparse.csr_matrix:
    n, m = active.shape
    rows = np.repeat(np.arange(n), m)
    cols = active.ravel()
    keep = cols >= 0
    data = np.ones(int(keep.sum()))
    return sparse.csr_matrix((data, (rows[keep], cols[keep])), shape=(n, k))


def linear_predictor(active: np.ndarray, beta: np.ndarray) -> np.ndarray:
    padded = np.append(beta, 0.0)
    return padded[np.where(active >= 0, active, len(beta))].sum(axis=1)


def newton_terms(active, count, ysum, beta):
    k = len(beta)
    X = _design(np.asarray(active), k)
    eta = X @ beta
    p = expit(eta)
    loss = float(np.sum(count * np.logaddexp(0.0, eta) - ysum * eta))
    grad = X.T @ (count * p - ysum)
    w = count * p * (1.0 - p)
    hess = (X.T @ sparse.diags(w) @ X).toarray()
    return loss, np.asarray(grad, dtype=float), hess
