"""Proper orthogonal decomposition of pre-model feature snapshots.

Snapshots x^(l) are unrolled (row-major) into the columns of S, S is
decomposed with a one-sided Jacobi SVD, and the leading left singular
vectors become a frozen linear projection z = Psi_r^T x.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .tensor import Tensor

RANK_TOL = 1e-12


@dataclass
class SnapshotMatrix:
    S: np.ndarray
    feature_shape: tuple
    column_ids: list = field(default_factory=list)

    @property
    def n_features(self):
        return self.S.shape[0]

    @property
    def n_snapshots(self):
        return self.S.shape[1]


@dataclass
class PODBasis:
    modes: np.ndarray              # n_l x r, orthonormal columns
    singular_values: np.ndarray    # all min(n_l, N) values, non-increasing
    right_vectors: np.ndarray = None
    mean: np.ndarray = None        # set only when snapshots were centred

    @property
    def rank(self):
        return self.modes.shape[1]

    @property
    def n_features(self):
        return self.modes.shape[0]


@dataclass(frozen=True)
class FixedRank:
    r: int


@dataclass(frozen=True)
class Energy:
    eps: float


def assemble_snapshots(pre_model, images, ids=None, batch_size=32):
    """Run the pre-model over ``images`` and stack the flattened outputs as columns."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValidationError("cannot assemble snapshots from an empty dataset")
    cols, shape = [], None
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out = pre_model(Tensor(images[start:start + batch_size])).data
            if shape is None:
                shape = out.shape[1:]
            elif out.shape[1:] != shape:
                raise ValidationError(f"inconsistent pre-model output shapes {shape} vs {out.shape[1:]}")
            cols.append(out.reshape(len(out), -1))
    S = np.ascontiguousarray(np.concatenate(cols, axis=0).T)
    ids = list(range(len(images))) if ids is None else list(ids)
    return SnapshotMatrix(S, tuple(shape), ids)


def _round_robin(n):
    """Tournament schedule: n-1 rounds (n even) of n/2 disjoint pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        rounds.append((np.array([p[0] for p in pairs], dtype=int), np.array([p[1] for p in pairs], dtype=int)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _one_sided_jacobi(A, tol=1e-15, max_sweeps=80):
    """Orthogonalise the columns of A (m >= n) by plane rotations.

    Returns (B, V) with B = A V having mutually orthogonal columns. Each
    round rotates n/2 disjoint column pairs at once; columns are kept as
    rows of a C-ordered array so the pair gathers are contiguous.
    """
    At = np.array(np.asarray(A, dtype=np.float64).T, order="C")
    n = At.shape[0]
    Vt = np.eye(n)
    if n < 2:
        return At.T, Vt.T
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = 0.0
        for I, J in rounds:
            ai, aj = At[I], At[J]
            alpha = np.einsum("ij,ij->i", ai, ai)
            beta = np.einsum("ij,ij->i", aj, aj)
            gamma = np.einsum("ij,ij->i", ai, aj)
            scale = np.sqrt(alpha * beta)
            active = (scale > 0) & (np.abs(gamma) > tol * scale)
            if not active.any():
                continue
            off = max(off, float(np.max(np.abs(gamma[active]) / scale[active])))
            I, J, ai, aj = I[active], J[active], ai[active], aj[active]
            zeta = (beta[active] - alpha[active]) / (2.0 * gamma[active])
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            At[I] = c * ai - s * aj
            At[J] = s * ai + c * aj
            vi, vj = Vt[I], Vt[J]
            Vt[I] = c * vi - s * vj
            Vt[J] = s * vi + c * vj
        if off <= tol:
            break
    return At.T, Vt.T


def _complete_orthonormal(U, good):
    """Replace columns of U not flagged ``good`` by a deterministic orthonormal completion."""
    if good.all():
        return U
    m = U.shape[0]
    basis = [U[:, i] for i in np.flatnonzero(good)]
    out = U.copy()
    candidates = iter(np.eye(m))
    for i in np.flatnonzero(~good):
        while True:
            v = next(candidates).copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                break
        basis.append(v)
        out[:, i] = v
    return out


def _fix_signs(U, V):
    # largest-magnitude entry of each left vector made positive
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[idx, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return U * signs, V * signs


def jacobi_svd(S):
    """Thin SVD S = U diag(s) V^T, k = min(m, n), s non-increasing.

    QR is used as a preconditioner so the Jacobi sweeps act on a k x k
    triangle. Singular values below 1e-12 * s_max are set to zero; their
    left vectors are completed to an orthonormal set.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.size == 0:
        raise ValidationError(f"SVD needs a non-empty matrix, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise ValidationError("snapshot matrix contains non-finite entries")
    m, n = S.shape
    if m < n:
        U, s, V = jacobi_svd(S.T)
        U, V = _fix_signs(V, U)
        return U, s, V

    Q, R = np.linalg.qr(S)
    B, V = _one_sided_jacobi(R)
    s = np.linalg.norm(B, axis=0)
    order = np.argsort(-s, kind="stable")
    s, B, V = s[order], B[:, order], V[:, order]
    smax = s[0] if s.size else 0.0
    good = s > RANK_TOL * smax if smax > 0 else np.zeros(len(s), dtype=bool)
    s = np.where(good, s, 0.0)
    Ur = np.zeros_like(B)
    Ur[:, good] = B[:, good] / s[good]
    Ur = _complete_orthonormal(Ur, good)
    U = Q @ Ur
    U, V = _fix_signs(U, V)
    return U, s, V


def compute_pod(snapshots, center=False):
    """POD of a snapshot matrix (or raw array); keeps every mode, use ``truncate`` to cut."""
    S = snapshots.S if isinstance(snapshots, SnapshotMatrix) else np.asarray(snapshots, dtype=np.float64)
    if S.size == 0:
        raise ValidationError("empty snapshot matrix")
    if not np.all(np.isfinite(S)):
        raise ValidationError("snapshot matrix contains non-finite entries")
    mean = None
    if center:
        mean = S.mean(axis=1)
        S = S - mean[:, None]
    U, s, V = jacobi_svd(S)
    return PODBasis(modes=U, singular_values=s, right_vectors=V, mean=mean)


def truncate(basis, r):
    k = basis.modes.shape[1]
    if not 1 <= r <= k:
        raise ValidationError(f"rank {r} outside [1, {k}]")
    right = None if basis.right_vectors is None else basis.right_vectors[:, :r]
    return replace(basis, modes=np.ascontiguousarray(basis.modes[:, :r]), right_vectors=right)


def cumulative_energy(singular_values):
    s = np.abs(np.asarray(singular_values, dtype=np.float64))
    if s.size and s.max() > 0:
        # power-of-two rescale: exact, and keeps squares of tiny values from underflowing
        s = np.ldexp(s, -int(np.frexp(s.max())[1]))
    e = np.cumsum(s ** 2)
    if e.size == 0 or e[-1] == 0:
        return np.zeros_like(e)
    return e / e[-1]


def select_rank(basis, policy):
    """Rank from ``FixedRank(r)`` or the smallest r reaching ``Energy(eps)``."""
    s = basis.singular_values if isinstance(basis, PODBasis) else np.asarray(basis)
    if isinstance(policy, FixedRank):
        if not 1 <= policy.r <= len(s):
            raise ValidationError(f"rank {policy.r} outside [1, {len(s)}]")
        return policy.r
    if isinstance(policy, Energy):
        if not 0 < policy.eps <= 1:
            raise ValidationError(f"energy threshold must be in (0, 1], got {policy.eps}")
        frac = cumulative_energy(s)
        hits = np.flatnonzero(frac >= policy.eps)
        return int(hits[0]) + 1 if hits.size else len(s)
    raise ValidationError(f"unknown rank policy {policy!r}")


def projection_weights(basis):
    """(weight, bias) of the equivalent linear layer: z = W flatten(x) + b."""
    W = np.ascontiguousarray(basis.modes.T)
    b = None if basis.mean is None else -(W @ basis.mean)
    return W, b


def project(basis, x_l):
    """z = Psi_r^T flatten(x_l).

    A 2-D input is a batch of flat vectors; a 1-D input, or any higher-rank
    input holding exactly n_l values, is a single activation.
    """
    x = x_l if isinstance(x_l, Tensor) else Tensor(x_l)
    n = basis.n_features
    single = x.ndim == 1 or (x.ndim > 2 and x.size == n)
    if single and x.size != n:
        raise ValidationError(f"projection expects {n} features, got input of shape {x.shape}")
    flat = x.reshape((1, n)) if single else T.flatten(x, 1)
    if flat.shape[1] != n:
        raise ValidationError(f"projection expects {n} features, got input of shape {x.shape}")
    W, b = projection_weights(basis)
    z = T.linear(flat, Tensor(W), None if b is None else Tensor(b))
    return z.reshape((basis.rank,)) if single else z


def reduce(x_l_batch, r, basis=None, center=False):
    """Project a batch of activations onto r POD modes, fitting the basis if none is given."""
    x = np.asarray(x_l_batch.data if isinstance(x_l_batch, Tensor) else x_l_batch, dtype=np.float64)
    if basis is None:
        basis = truncate(compute_pod(x.reshape(len(x), -1).T, center=center), r)
    elif basis.rank != r:
        basis = truncate(basis, r)
    return project(basis, Tensor(x.reshape(len(x), -1))).data, basis
