"""Tensor-train tensors and matrices.

Cores of a TT tensor have shape ``(l_k, r_{k-1}, r_k)``; cores of a TT
matrix have shape ``(m_k, n_k, r_{k-1}, r_k)`` with boundary ranks
``r_0 = r_d = 1``. Row and column indices are row-major over the mode
sizes, and mode ``k`` of the paired tensor is indexed by
``pair_index(i_k, j_k, m_k, n_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ModeMismatch, ShapeError, ShapeMismatch
from .tensor import check_shape, flat_to_multi, numel


def _check_chain(ranks: Sequence[int]) -> None:
    if ranks[0] != 1 or ranks[-1] != 1:
        raise ShapeMismatch(f"boundary ranks must be 1, got {tuple(ranks)}")


@dataclass(frozen=True)
class TTCores:
    cores: tuple

    def __init__(self, cores: Sequence[np.ndarray]):
        cores = tuple(np.asarray(c) for c in cores)
        if not cores or any(c.ndim != 3 for c in cores):
            raise ShapeError("TT cores must be a nonempty list of 3-way arrays")
        for a, b in zip(cores, cores[1:]):
            if a.shape[2] != b.shape[1]:
                raise ShapeMismatch(f"rank mismatch between cores {a.shape} and {b.shape}")
        _check_chain([cores[0].shape[1]] + [c.shape[2] for c in cores])
        object.__setattr__(self, "cores", cores)

    @property
    def modes(self) -> tuple[int, ...]:
        return tuple(c.shape[0] for c in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[2] for c in self.cores)


def tt_element(tt: TTCores, idx: Sequence[int]) -> float:
    if len(idx) != len(tt.cores):
        raise ShapeError(f"index {tuple(idx)} has wrong arity for modes {tt.modes}")
    out = np.ones((1, 1))
    for core, h in zip(tt.cores, idx):
        if not 0 <= h < core.shape[0]:
            raise ShapeError(f"index {tuple(idx)} out of range for modes {tt.modes}")
        out = out @ core[h]
    return float(out[0, 0])


def tt_full(tt: TTCores) -> np.ndarray:
    res = np.ones((1, 1))
    for core in tt.cores:
        res = np.einsum("Pa,lab->Plb", res, core).reshape(-1, core.shape[2])
    return res.reshape(tt.modes)


def tt_svd(a: np.ndarray, max_ranks: Union[None, int, Sequence[int]] = None,
           tol: float = 0.0) -> tuple[TTCores, float]:
    """Left-to-right TT-SVD of a dense tensor.

    Returns the cores and the Frobenius norm of everything discarded, which
    equals the reconstruction error because the left cores are orthonormal.
    ``tol`` is a relative accuracy target split evenly over the ``d-1``
    truncations; ``tol=0`` drops only numerically zero singular values.
    """
    a = np.asarray(a, dtype=np.float64)
    modes = a.shape
    d = len(modes)
    if isinstance(max_ranks, (int, np.integer)) or max_ranks is None:
        caps = [max_ranks] * (d - 1)
    else:
        caps = list(max_ranks)
        if len(caps) != d - 1:
            raise ShapeError(f"need {d - 1} internal rank caps, got {len(caps)}")
    delta = tol * np.linalg.norm(a) / np.sqrt(max(d - 1, 1))
    cores = []
    discarded_sq = 0.0
    r = 1
    c = a.reshape(1, -1)
    for k in range(d - 1):
        c = c.reshape(r * modes[k], -1)
        u, s, vt = np.linalg.svd(c, full_matrices=False)
        tail = np.sqrt(np.cumsum((s ** 2)[::-1]))[::-1]  # tail[i] = ||s[i:]||
        if tol > 0:
            keep = int(np.sum(tail > delta))
        else:
            floor = s[0] * max(c.shape) * np.finfo(np.float64).eps if s.size else 0.0
            keep = int(np.sum(s > floor))
        keep = max(keep, 1)
        if caps[k] is not None:
            keep = min(keep, int(caps[k]))
        discarded_sq += float(np.sum(s[keep:] ** 2))
        cores.append(u[:, :keep].reshape(r, modes[k], keep).transpose(1, 0, 2))
        c = s[:keep, None] * vt[:keep]
        r = keep
    cores.append(c.reshape(r, modes[-1], 1).transpose(1, 0, 2))
    return TTCores(cores), float(np.sqrt(discarded_sq))


class TTMatrix:
    """A ``prod(row_modes) x prod(col_modes)`` matrix in TT format."""

    def __init__(self, cores: Sequence[np.ndarray]):
        cores = [np.asarray(c) for c in cores]
        if not cores or any(c.ndim != 4 for c in cores):
            raise ShapeError("TT-matrix cores must be a nonempty list of 4-way arrays")
        for a, b in zip(cores, cores[1:]):
            if a.shape[3] != b.shape[2]:
                raise ShapeMismatch(f"rank mismatch between cores {a.shape} and {b.shape}")
        _check_chain([cores[0].shape[2]] + [c.shape[3] for c in cores])
        self.cores = cores

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def row_modes(self) -> tuple[int, ...]:
        return tuple(c.shape[0] for c in self.cores)

    @property
    def col_modes(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[3] for c in self.cores)

    @property
    def shape(self) -> tuple[int, int]:
        return numel(self.row_modes), numel(self.col_modes)

    @property
    def param_count(self) -> int:
        return sum(c.size for c in self.cores)

    def copy(self) -> "TTMatrix":
        return TTMatrix([c.copy() for c in self.cores])

    def __repr__(self):
        return (f"TTMatrix(row_modes={self.row_modes}, col_modes={self.col_modes}, "
                f"ranks={self.ranks})")

    @classmethod
    def identity(cls, modes: Sequence[int], dtype=np.float64) -> "TTMatrix":
        return cls([np.eye(m, dtype=dtype)[:, :, None, None] for m in modes])

    @classmethod
    def zeros(cls, row_modes, col_modes, ranks, dtype=np.float64) -> "TTMatrix":
        _check_modes_ranks(row_modes, col_modes, ranks)
        return cls([np.zeros((m, n, ranks[k], ranks[k + 1]), dtype=dtype)
                    for k, (m, n) in enumerate(zip(row_modes, col_modes))])

    @classmethod
    def random(cls, row_modes, col_modes, ranks, rng: np.random.Generator,
               std: float = 1.0, dtype=np.float64) -> "TTMatrix":
        _check_modes_ranks(row_modes, col_modes, ranks)
        return cls([(std * rng.standard_normal((m, n, ranks[k], ranks[k + 1]))).astype(dtype)
                    for k, (m, n) in enumerate(zip(row_modes, col_modes))])


def _check_modes_ranks(row_modes, col_modes, ranks) -> None:
    check_shape(row_modes)
    check_shape(col_modes)
    if len(row_modes) != len(col_modes) or len(ranks) != len(row_modes) + 1:
        raise ShapeMismatch(f"modes {tuple(row_modes)}x{tuple(col_modes)} incompatible "
                            f"with ranks {tuple(ranks)}")
    check_shape(ranks)
    _check_chain(ranks)


def tt_matrix_element(ttm: TTMatrix, row, col) -> float:
    """Entry (row, col); indices may be flat ints or per-mode tuples."""
    rows = flat_to_multi(row, ttm.row_modes) if np.isscalar(row) else list(row)
    cols = flat_to_multi(col, ttm.col_modes) if np.isscalar(col) else list(col)
    out = np.ones((1, 1))
    for core, i, j in zip(ttm.cores, rows, cols):
        out = out @ core[i, j]
    return float(out[0, 0])


def tt_reconstruct(ttm: TTMatrix) -> np.ndarray:
    res = np.ones((1, 1), dtype=np.result_type(*ttm.cores))
    for core in ttm.cores:
        m, n, _, r = core.shape
        res = np.einsum("Pa,mnab->Pmnb", res, core).reshape(-1, r)
    d = ttm.d
    full = res.reshape([s for mn in zip(ttm.row_modes, ttm.col_modes) for s in mn])
    full = full.transpose(list(range(0, 2 * d, 2)) + list(range(1, 2 * d, 2)))
    return full.reshape(ttm.shape)


def tt_from_dense(matrix: np.ndarray, row_modes: Sequence[int], col_modes: Sequence[int],
                  max_ranks: Union[None, int, Sequence[int]] = None,
                  tol: float = 0.0) -> tuple[TTMatrix, float]:
    """Decompose a dense matrix into a TT-matrix via TT-SVD of the paired tensor.

    Returns ``(ttm, error)`` where ``error`` is the Frobenius norm of the
    discarded part (zero up to rounding when nothing is truncated).
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    row_modes, col_modes = check_shape(row_modes), check_shape(col_modes)
    if len(row_modes) != len(col_modes):
        raise ModeMismatch(f"row modes {row_modes} and col modes {col_modes} differ in length")
    if matrix.ndim != 2 or matrix.shape != (numel(row_modes), numel(col_modes)):
        raise ModeMismatch(f"matrix {matrix.shape} does not factor as {row_modes} x {col_modes}")
    d = len(row_modes)
    paired = matrix.reshape(row_modes + col_modes)
    paired = paired.transpose([p for k in range(d) for p in (k, d + k)])
    paired = paired.reshape([m * n for m, n in zip(row_modes, col_modes)])
    tt, err = tt_svd(paired, max_ranks, tol)
    cores = [c.reshape(m, n, c.shape[1], c.shape[2])
             for c, m, n in zip(tt.cores, row_modes, col_modes)]
    return TTMatrix(cores), err


# --------------------------------------------------------------------------
# products

def tt_matmul(cores: Sequence[np.ndarray], x: np.ndarray,
              cache: Optional[list] = None) -> np.ndarray:
    """``x @ W`` for a batch ``x`` of shape (B, M), never forming W.

    Cores are contracted left to right; the running state has shape
    (B, r_k, remaining row modes, finished col modes). When ``cache`` is a
    list, the per-step inputs are appended for :func:`tt_matmul_backward`.
    """
    b = x.shape[0]
    z = x.reshape(b, 1, -1, 1)
    for core in cores:
        m, n, r0, r1 = core.shape
        _, _, rest, done = z.shape
        z = z.reshape(b, r0, m, rest // m, done)
        if cache is not None:
            cache.append(z)
        z = np.einsum("bamRD,mnac->bcRDn", z, core, optimize=True)
        z = z.reshape(b, r1, rest // m, done * n)
    return z.reshape(b, -1)


def tt_matmul_backward(cores: Sequence[np.ndarray], cache: Sequence[np.ndarray],
                       grad_out: np.ndarray, need_input_grad: bool = True):
    """Gradients of ``tt_matmul`` w.r.t. its input and each core."""
    b = grad_out.shape[0]
    g = grad_out.reshape(b, 1, 1, -1)
    core_grads = [None] * len(cores)
    for k in range(len(cores) - 1, -1, -1):
        core, z = cores[k], cache[k]
        m, n, r0, r1 = core.shape
        _, _, _, rest, done = z.shape
        g5 = g.reshape(b, r1, rest, done, n)
        core_grads[k] = np.einsum("bamRD,bcRDn->mnac", z, g5, optimize=True)
        if k == 0 and not need_input_grad:
            break
        g = np.einsum("bcRDn,mnac->bamRD", g5, core, optimize=True).reshape(b, r0, m * rest, done)
    grad_in = g.reshape(b, -1) if need_input_grad else None
    return grad_in, core_grads


def tt_matvec(ttm: TTMatrix, x: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """y = W^T-style contraction of an input shaped like the row modes.

    Computes ``Y(j) = sum_i W(i, j) X(i) + B(j)`` and returns an array shaped
    like the column modes.
    """
    x = np.asarray(x)
    if x.shape != ttm.row_modes and x.shape != (ttm.shape[0],):
        raise ShapeError(f"input {x.shape} does not match row modes {ttm.row_modes}")
    y = tt_matmul(ttm.cores, x.reshape(1, -1))[0]
    if bias is not None:
        bias = np.asarray(bias)
        if bias.size != y.size or (bias.ndim > 1 and bias.shape != ttm.col_modes):
            raise ShapeError(f"bias {bias.shape} does not match col modes {ttm.col_modes}")
        y = y + bias.reshape(-1)
    return y.reshape(ttm.col_modes)


# --------------------------------------------------------------------------
# accounting

def tt_param_count(row_modes: Sequence[int], col_modes: Sequence[int],
                   ranks: Sequence[int]) -> int:
    _check_modes_ranks(row_modes, col_modes, ranks)
    return sum(m * n * ranks[k] * ranks[k + 1]
               for k, (m, n) in enumerate(zip(row_modes, col_modes)))


def tt_flops(row_modes: Sequence[int], col_modes: Sequence[int], ranks: Sequence[int]) -> int:
    """Multiplications performed by :func:`tt_matmul` for one input vector."""
    _check_modes_ranks(row_modes, col_modes, ranks)
    rest, done, total = numel(row_modes), 1, 0
    for k, (m, n) in enumerate(zip(row_modes, col_modes)):
        rest //= m
        total += ranks[k] * m * n * ranks[k + 1] * rest * done
        done *= n
    return total


def tt_complexity_bound(row_modes: Sequence[int], col_modes: Sequence[int],
                        ranks: Sequence[int]) -> int:
    """The ``d * r^2 * n_max`` figure, with r the largest rank and
    n_max the largest paired mode size ``m_k * n_k``."""
    _check_modes_ranks(row_modes, col_modes, ranks)
    return len(row_modes) * max(ranks) ** 2 * max(m * n for m, n in zip(row_modes, col_modes))


def dense_flops(row_modes: Sequence[int], col_modes: Sequence[int]) -> int:
    return numel(row_modes) * numel(col_modes)
