"""Exact Fixed-Weight-NTK analysis for small networks.

The empirical NTK at the current weights is assembled from a dense
(N*K) x m Jacobian built by one backward pass per output component. The
kernel, its trace (computed two independent ways and cross-checked), and
the full eigenspectrum via a cyclic Jacobi rotation solver are exact at
desk scale; the two Frobenius bound terms are produced by the same forced /
pass-through forward passes the pruning saliency uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff, tensor
from .model import Network

JACOBIAN_ENTRY_CAP = 20_000_000
EIG_OFFDIAG_TOL = 1e-12
EIG_MAX_SWEEPS = 100


class JacobianCapError(ValueError):
    """Dense Jacobian storage would exceed the configured cap."""


class EigenConvergenceError(RuntimeError):
    """Jacobi sweeps did not reduce the off-diagonal norm below tolerance."""


@dataclass
class NTKResult:
    kernel: np.ndarray
    trace: float
    eigenvalues: np.ndarray | None = None


def jacobian(net: Network, X: np.ndarray, max_entries: int = JACOBIAN_ENTRY_CAP) -> np.ndarray:
    """(N*K) x m matrix of output gradients; masked columns are exactly zero.

    Row (n, k) holds the gradient of output k on example n, obtained by a
    backward pass with a one-hot seed. Rows are assembled in index order.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    k = net.output_dim
    if n * k * net.m > max_entries:
        raise JacobianCapError(f"{n}x{k}x{net.m} entries exceed cap {max_entries}")
    out, _, tape = autodiff.forward(net, X, autodiff.STANDARD)
    j = np.empty((n * k, net.m), dtype=np.float64)
    seed = np.zeros_like(out)
    for ni in range(n):
        for ki in range(k):
            seed[ni, ki] = 1.0
            j[ni * k + ki] = autodiff.backward(tape, seed) * net.mask
            seed[ni, ki] = 0.0
    return j


def ntk_from_jacobian(j: np.ndarray) -> NTKResult:
    """Kernel J J^T with the trace computed both as sum(diag) and as the
    squared Frobenius norm of J; the two must agree to 1e-10 relative."""
    kernel = j @ j.T
    kernel = (kernel + kernel.T) / 2.0
    trace_diag = float(np.trace(kernel))
    trace_frob = float(np.sum(j * j))
    scale = max(abs(trace_diag), abs(trace_frob), 1e-300)
    if abs(trace_diag - trace_frob) > 1e-10 * scale:
        raise FloatingPointError(
            f"trace disagreement: diag {trace_diag!r} vs frobenius {trace_frob!r}")
    return NTKResult(kernel=kernel, trace=trace_diag)


def jacobi_eigenvalues(a: np.ndarray, tol: float = EIG_OFFDIAG_TOL,
                       max_sweeps: int = EIG_MAX_SWEEPS) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
    descending. Stops when the off-diagonal norm falls below tol * ||A||_F."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise tensor.ShapeError(f"expected square matrix, got {a.shape}")
    sym_err = np.max(np.abs(a - a.T)) if n else 0.0
    norm = float(np.linalg.norm(a))
    if sym_err > 1e-10 * max(norm, 1e-300):
        raise tensor.ShapeError("matrix is not symmetric")
    a = (a + a.T) / 2.0
    if n <= 1 or norm == 0.0:
        return np.sort(np.diag(a))[::-1].copy()

    def offdiag(m):
        return float(np.sqrt(np.sum(m**2) - np.sum(np.diag(m) ** 2)))

    for _ in range(max_sweeps):
        if offdiag(a) <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                # stable rotation angle: t = sign(tau) / (|tau| + sqrt(1 + tau^2))
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                a[p, q] = 0.0
                a[q, p] = 0.0
    else:
        raise EigenConvergenceError(f"no convergence after {max_sweeps} sweeps")
    return np.sort(np.diag(a))[::-1].copy()


def eigenspectrum(result: NTKResult, tol: float = EIG_OFFDIAG_TOL,
                  max_sweeps: int = EIG_MAX_SWEEPS) -> np.ndarray:
    """Descending eigenvalues of the kernel; cached on the result."""
    eigs = jacobi_eigenvalues(result.kernel, tol=tol, max_sweeps=max_sweeps)
    result.eigenvalues = eigs
    return eigs


def compute_ntk(net: Network, X: np.ndarray, with_spectrum: bool = False,
                max_entries: int = JACOBIAN_ENTRY_CAP) -> NTKResult:
    result = ntk_from_jacobian(jacobian(net, X, max_entries=max_entries))
    if with_spectrum:
        eigenspectrum(result)
    return result


def bound_terms(net: Network, X: np.ndarray) -> tuple[float, float]:
    """The two Frobenius factors of the NTK trace bound, via forward passes.

    The data term runs a forced forward on squared inputs with all-ones
    (masked) weights, reusing the activation record of the real network.
    The path-kernel term differentiates a pass-through forward on squared
    (masked) weights with a one-hot seed per output and sums all gradient
    components. No overflow rescaling is applied here; the bound check
    needs raw values, so overflow surfaces as an error for the caller.
    """
    X = np.asarray(X, dtype=np.float64)
    _, record, _ = autodiff.forward(net, X, autodiff.STANDARD, tape=False)
    z_g, _, _ = autodiff.forward(net, X**2, autodiff.Forced(record),
                                 params=net.mask.copy(), tape=False)
    jvf_sq = float(z_g.sum())

    ones = np.ones((1,) + net.input_shape)
    out_h, _, tape = autodiff.forward(net, ones, autodiff.PASSTHROUGH,
                                      params=net.params**2 * net.mask)
    jtv_sq = 0.0
    seed = np.zeros_like(out_h)
    for ki in range(out_h.shape[1]):
        seed[0, ki] = 1.0
        jtv_sq += float((autodiff.backward(tape, seed) * net.mask).sum())
        seed[0, ki] = 0.0
    return jvf_sq, jtv_sq


def spectrum_rows(method: str, sparsity_pct: float, seed: int,
                  eigenvalues: np.ndarray) -> list[tuple]:
    """Rows for the spectrum CSV: (method, sparsity, seed, eig_index, eigenvalue)."""
    return [(method, f"{sparsity_pct:.2f}", seed, i, f"{val:.17e}")
            for i, val in enumerate(eigenvalues)]
