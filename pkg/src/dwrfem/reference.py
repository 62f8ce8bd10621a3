"""Reference-square machinery: equispaced Lagrange bases and Gauss rules on [0, 1]."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_1d(n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss-Legendre rule mapped to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def gauss_2d(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss rule on the unit square; points ordered x-fastest."""
    x, w = gauss_1d(n)
    px, py = np.meshgrid(x, x, indexing="xy")
    wx, wy = np.meshgrid(w, w, indexing="xy")
    return np.stack([px.ravel(), py.ravel()], axis=1), (wx * wy).ravel()


@lru_cache(maxsize=None)
def _lagrange_coefficients(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Monomial coefficients (ascending powers) of the basis and its derivative."""
    nodes = np.linspace(0.0, 1.0, k + 1)
    C = np.zeros((k + 1, k + 1))
    for a in range(k + 1):
        others = np.delete(nodes, a)
        C[:, a] = np.poly(others)[::-1] / np.prod(nodes[a] - others)
    D = C[1:] * np.arange(1, k + 1)[:, None]
    return C, D


def lagrange_1d(k: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of the k+1 equispaced Lagrange polynomials at ``x``.

    Returns arrays of shape ``(len(x), k + 1)``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    C, D = _lagrange_coefficients(k)
    powers = x[:, None] ** np.arange(k + 1)
    return powers @ C, powers[:, :k] @ D


def local_node_index(k: int, a: int, b: int) -> int:
    """Index of the tensor node (a, b) in lexicographic x-fastest order."""
    return a + (k + 1) * b


def tabulate(k: int, points) -> tuple[np.ndarray, np.ndarray]:
    """Q_k shape functions at reference points.

    Returns ``values`` of shape ``(npts, nloc)`` and ``grads`` of shape
    ``(npts, nloc, 2)`` where local functions are ordered x-fastest over the
    ``(k + 1)**2`` equispaced nodes.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    vx, dx = lagrange_1d(k, p[:, 0])
    vy, dy = lagrange_1d(k, p[:, 1])
    # (npts, b, a) -> flatten as a + (k+1) b
    values = (vy[:, :, None] * vx[:, None, :]).reshape(len(p), -1)
    gx = (vy[:, :, None] * dx[:, None, :]).reshape(len(p), -1)
    gy = (dy[:, :, None] * vx[:, None, :]).reshape(len(p), -1)
    return values, np.stack([gx, gy], axis=2)


def reference_nodes(k: int) -> np.ndarray:
    """Equispaced Q_k nodes on the unit square, x-fastest."""
    t = np.linspace(0.0, 1.0, k + 1)
    px, py = np.meshgrid(t, t, indexing="xy")
    return np.stack([px.ravel(), py.ravel()], axis=1)
