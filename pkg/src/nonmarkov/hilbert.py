"""Dense complex operator algebra on small Hilbert spaces.

States are complex vectors, operators dense complex matrices (``ndarray``,
``complex128``). Everything constructed here is immutable afterwards, so
grids and Heisenberg families can be shared read-only across trajectory
workers.

Conventions: hbar = 1, time in units of inverse energy. ``sigma_minus`` maps
basis state 0 to basis state 1.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DegeneracyError, ValidationError

DEFAULT_DIM_CAP = 64
HERMITIAN_ATOL = 1e-12

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
SIGMA_PLUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
SIGMA_MINUS = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)
for _m in (SIGMA_X, SIGMA_Y, SIGMA_Z, SIGMA_PLUS, SIGMA_MINUS):
    _m.setflags(write=False)


def as_operator(matrix, name: str = "operator", dim_cap: int | None = None) -> np.ndarray:
    """Coerce to a square finite complex matrix, raising ValidationError otherwise."""
    op = np.array(matrix, dtype=complex)
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise ValidationError(f"{name} must be a square matrix, got shape {op.shape}")
    if not np.all(np.isfinite(op.real)) or not np.all(np.isfinite(op.imag)):
        raise ValidationError(f"{name} has non-finite entries")
    if dim_cap is not None and op.shape[0] > dim_cap:
        raise ValidationError(
            f"{name} dimension {op.shape[0]} exceeds configured cap {dim_cap}"
        )
    return op


def as_state(vector, name: str = "state", require_normalized: bool = False) -> np.ndarray:
    psi = np.array(vector, dtype=complex).reshape(-1)
    if not np.all(np.isfinite(psi.real)) or not np.all(np.isfinite(psi.imag)):
        raise ValidationError(f"{name} has non-finite amplitudes")
    if require_normalized and abs(np.linalg.norm(psi) - 1.0) > 1e-12:
        raise ValidationError(f"{name} must have unit norm, got {np.linalg.norm(psi)!r}")
    return psi


def hermiticity_defect(op: np.ndarray) -> float:
    return float(np.max(np.abs(op - op.conj().T))) if op.size else 0.0


def is_hermitian(op: np.ndarray, atol: float = HERMITIAN_ATOL) -> bool:
    return hermiticity_defect(op) <= atol


def require_hermitian(op: np.ndarray, name: str = "operator", atol: float = HERMITIAN_ATOL) -> np.ndarray:
    if not is_hermitian(op, atol):
        raise ValidationError(
            f"{name} must be Hermitian (defect {hermiticity_defect(op):.3e} > {atol:.1e})"
        )
    return op


_PRESET_RE = re.compile(r"^([a-z_]+)(?:\((\d+)\))?$")


def operator_preset(name: str, dim: int | None = None) -> np.ndarray:
    """Build a named operator: sigma_x, sigma_y, sigma_z, number(n), position_trunc(n).

    ``number`` and ``position_trunc`` accept the dimension either inline,
    e.g. ``number(4)``, or through the ``dim`` hint.
    """
    m = _PRESET_RE.match(name.strip())
    if not m:
        raise ValidationError(f"unknown operator preset {name!r}")
    base, arg = m.group(1), m.group(2)
    n = int(arg) if arg is not None else dim
    paulis = {"sigma_x": SIGMA_X, "sigma_y": SIGMA_Y, "sigma_z": SIGMA_Z,
              "sigma_plus": SIGMA_PLUS, "sigma_minus": SIGMA_MINUS}
    if base in paulis:
        if n not in (None, 2):
            raise ValidationError(f"preset {base!r} is two-dimensional, got dim {n}")
        return paulis[base].copy()
    if base == "number":
        if n is None:
            raise ValidationError("preset 'number' needs a dimension, e.g. number(4)")
        return np.diag(np.arange(n, dtype=float)).astype(complex)
    if base == "position_trunc":
        if n is None:
            raise ValidationError("preset 'position_trunc' needs a dimension")
        a = np.diag(np.sqrt(np.arange(1, n, dtype=float)), k=1).astype(complex)
        return (a + a.conj().T) / np.sqrt(2.0)
    raise ValidationError(f"unknown operator preset {name!r}")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_n = n*dt, n = 0..n_steps (n_steps+1 points)."""

    dt: float
    n_steps: int

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValidationError(f"dt must be positive and finite, got {self.dt}")
        if self.n_steps < 1:
            raise ValidationError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @property
    def t_max(self) -> float:
        return self.dt * self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_points) * self.dt
        t.setflags(write=False)
        return t


def matrix_exponential(op: np.ndarray, z: complex) -> np.ndarray:
    """exp(z*op): eigendecomposition for Hermitian op, Pade otherwise."""
    op = as_operator(op)
    if not np.isfinite(z.real) or not np.isfinite(z.imag if isinstance(z, complex) else 0.0):
        raise ValidationError("exponent factor must be finite")
    if is_hermitian(op):
        w, v = np.linalg.eigh(op)
        return (v * np.exp(z * w)) @ v.conj().T
    return scipy.linalg.expm(z * op)


def expm_batch(mats: np.ndarray) -> np.ndarray:
    """Matrix exponentials of a stack (..., d, d) via scaling-and-squaring Taylor.

    Intended for small per-step generators; the scaling power is shared across
    the batch so results are deterministic regardless of batch composition.
    """
    mats = np.asarray(mats, dtype=complex)
    d = mats.shape[-1]
    norm = np.abs(mats).sum(axis=-2).max(axis=-1)  # 1-norm per matrix
    max_norm = float(norm.max()) if norm.size else 0.0
    s = max(0, int(np.ceil(np.log2(max_norm / 0.25))) if max_norm > 0.25 else 0)
    x = mats / (2.0 ** s)
    eye = np.broadcast_to(np.eye(d, dtype=complex), mats.shape)
    term = eye.copy()
    out = eye.copy()
    for k in range(1, 19):
        term = term @ x / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


@dataclass
class HeisenbergFamily:
    """Interaction-picture coupling operators A^j(t_n) on a time grid.

    ``ops[j, n]`` is exp(+iHt_n) A_j exp(-iHt_n). The Hamiltonian eigensystem
    is kept so operators can be evaluated at off-grid times (integrator stage
    points). Arrays are frozen after construction.
    """

    grid: TimeGrid
    ops: np.ndarray  # (J, n_points, d, d)
    hermitian: tuple[bool, ...]
    hamiltonian: np.ndarray
    base_ops: np.ndarray  # (J, d, d)
    eigvals: np.ndarray = field(repr=False, default=None)
    eigvecs: np.ndarray = field(repr=False, default=None)

    @property
    def dim(self) -> int:
        return self.base_ops.shape[-1]

    @property
    def n_channels(self) -> int:
        return self.base_ops.shape[0]

    def operators_at(self, times: np.ndarray) -> np.ndarray:
        """Evaluate the family at arbitrary times, shape (J, len(times), d, d)."""
        times = np.asarray(times, dtype=float)
        phases = np.exp(1j * np.outer(times, self.eigvals))  # (T, d)
        tilde = np.einsum("ab,jbc,cd->jad", self.eigvecs.conj().T, self.base_ops, self.eigvecs)
        twisted = tilde[:, None, :, :] * phases[None, :, :, None] * phases.conj()[None, :, None, :]
        return np.einsum("ab,jtbc,dc->jtad", self.eigvecs, twisted, self.eigvecs.conj())


def heisenberg_evolve(
    H: np.ndarray,
    ops,
    grid: TimeGrid,
    hermitian: tuple[bool, ...] | None = None,
    dim_cap: int = DEFAULT_DIM_CAP,
) -> HeisenbergFamily:
    """Heisenberg-evolve coupling operators: A_j(t) = U(t)^dag A_j U(t), U = exp(-iHt)."""
    H = as_operator(H, "hamiltonian", dim_cap=dim_cap)
    require_hermitian(H, "hamiltonian")
    base = np.stack([as_operator(a, f"channel {j}") for j, a in enumerate(ops)])
    if base.shape[-1] != H.shape[0]:
        raise ValidationError("channel dimension does not match the Hamiltonian")
    if hermitian is None:
        hermitian = tuple(True for _ in range(base.shape[0]))
    for j, flag in enumerate(hermitian):
        if flag and not is_hermitian(base[j]):
            raise ValidationError(
                f"channel {j} flagged Hermitian but has defect "
                f"{hermiticity_defect(base[j]):.3e}"
            )

    w, v = np.linalg.eigh(H)
    fam = HeisenbergFamily(
        grid=grid, ops=None, hermitian=tuple(hermitian), hamiltonian=H,
        base_ops=base, eigvals=w, eigvecs=v,
    )
    ops_t = fam.operators_at(grid.times)
    ops_t[:, 0] = base  # exact at t = 0
    ops_t.setflags(write=False)
    base.setflags(write=False)
    fam.ops = ops_t
    return fam


def _cluster_sorted(values: np.ndarray, tol: float) -> list[np.ndarray]:
    """Group sorted values into clusters split at gaps larger than tol."""
    if values.size == 0:
        return []
    splits = np.where(np.diff(values) > tol)[0] + 1
    return np.split(np.arange(values.size), splits)


def bohr_decomposition(
    H: np.ndarray, A: np.ndarray, cluster_rtol: float = 1e-9
) -> list[tuple[float, np.ndarray]]:
    """Split A into Bohr-frequency components A_w with A(t) = sum_w A_w e^{-iwt}.

    A_w = sum over eigenprojector pairs (P_a, P_b) of P_a A P_b with
    E_b - E_a = w. Eigenvalues closer than cluster_rtol * (spectral range) are
    merged; clusters that remain ambiguously separated raise DegeneracyError.
    """
    H = as_operator(H, "hamiltonian")
    require_hermitian(H, "hamiltonian")
    A = as_operator(A, "operator")
    w, v = np.linalg.eigh(H)
    spread = float(w[-1] - w[0])
    tol = cluster_rtol * max(spread, 1.0e-300)
    clusters = _cluster_sorted(w, tol)
    centers = np.array([w[idx].mean() for idx in clusters])
    if len(centers) > 1:
        gaps = np.diff(centers)
        if gaps.min() < 5 * tol:
            raise DegeneracyError(float(gaps.min()), 5 * tol)

    a_tilde = v.conj().T @ A @ v
    freq_items: list[tuple[float, np.ndarray]] = []
    for ia, idx_a in enumerate(clusters):
        for ib, idx_b in enumerate(clusters):
            sub = a_tilde[np.ix_(idx_a, idx_b)]
            block = v[:, idx_a] @ sub @ v[:, idx_b].conj().T
            freq_items.append((float(centers[ib] - centers[ia]), block))

    # merge components whose frequencies coincide (within tolerance)
    freq_items.sort(key=lambda p: p[0])
    freqs = np.array([p[0] for p in freq_items])
    merged: list[tuple[float, np.ndarray]] = []
    for idx in _cluster_sorted(freqs, tol):
        omega = float(freqs[idx].mean())
        comp = sum(freq_items[i][1] for i in idx)
        if np.max(np.abs(comp)) > 1e-14 * max(np.max(np.abs(A)), 1.0):
            merged.append((omega, comp))
    if not merged:
        merged.append((0.0, np.zeros_like(A)))
    total = sum(c for _, c in merged)
    if np.max(np.abs(total - A)) > 1e-10 * max(np.max(np.abs(A)), 1.0):
        raise ValidationError("Bohr components do not reconstruct the operator")
    return merged
