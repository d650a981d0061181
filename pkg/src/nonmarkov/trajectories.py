"""Stochastic propagation of unnormalized states under the corrected Green operator.

All engines integrate the linear (unnormalized) unravelling: trajectory means
of outer products reproduce the master-equation state, individual norms
fluctuate. Noise is sampled on the grid; each step uses the trapezoidal
average of the endpoint values, consistent with the quadrature the commuting
engine applies to the same integrals, so the two agree exactly on commuting
scenarios with S = D.

Engines:

* unitary: real noise, exactly norm-preserving exponential steps.
* commuting: joint-eigenbasis closed form with the time-ordered counter-term;
  exact up to quadrature, no operator-splitting error.
* hierarchy: auxiliary-state recursion for memory kernels in exponential-sum
  form, RK4 with the noise frozen per step.
* markov_sse: white-noise stochastic step for time-local kernels.

Trajectories are independent work units; batches are vectorized and
accumulation order is fixed for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    CommutationError,
    DimensionCapError,
    KernelRoutingError,
    PSDCertificationError,
    ValidationError,
)
from .hilbert import HeisenbergFamily, TimeGrid, as_operator, as_state, expm_batch
from .kernels import (
    DiscretizedKernels,
    PronySum,
    PronyTerm,
    SChoice,
    StationarySpectrum,
    TabulatedKernel,
    TimeLocal,
    stacked_kernel,
)

COMMUTATION_RTOL = 1e-10
_BASIS_SEEDS = (0xA11CE, 0xB0B)


@dataclass(frozen=True)
class TrajectoryConfig:
    grid: TimeGrid
    engine: str
    s_choice: SChoice
    n_trajectories: int
    master_seed: int
    hierarchy_depth: int = 1
    index_cap: int = 20000
    chunk_size: int = 1024

    def __post_init__(self):
        if self.engine not in ("commuting", "hierarchy", "unitary", "markov_sse"):
            raise ValidationError(f"unknown engine {self.engine!r}")
        if self.hierarchy_depth < 1:
            raise ValidationError("hierarchy depth must be >= 1")
        if self.engine == "unitary" and self.s_choice.tag != "unitary":
            raise ValidationError("the unitary engine requires the unitary S choice")
        if self.n_trajectories < 1:
            raise ValidationError("need at least one trajectory")


@dataclass
class TrajectoryEnsemble:
    """Unnormalized state paths, (n_traj, n_points, d), with their seed base."""

    grid: TimeGrid
    states: np.ndarray
    master_seed: int
    first_index: int = 0

    @property
    def n_trajectories(self) -> int:
        return self.states.shape[0]

    def norms(self) -> np.ndarray:
        return np.einsum("bnd,bnd->bn", self.states.conj(), self.states).real


def _cumtrapz(y: np.ndarray, dt: float, axis: int = -1) -> np.ndarray:
    y = np.moveaxis(y, axis, -1)
    inc = (y[..., :-1] + y[..., 1:]) * (dt / 2)
    out = np.zeros_like(y)
    np.cumsum(inc, axis=-1, out=out[..., 1:])
    return np.moveaxis(out, -1, axis)


def _noise_batchify(noise: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(noise, dtype=complex)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim != 3:
        raise ValidationError(f"noise must be (J, N) or (batch, J, N), got {arr.shape}")
    return arr, False


def propagate_unitary(family: HeisenbergFamily, noise, psi0) -> np.ndarray:
    """Norm-preserving evolution under real noise (S = D case).

    Step: psi_{n+1} = exp(-i dt * avg_n) psi_n with avg_n the trapezoidal
    average of sum_j A_j(t) phi_j(t) over the step endpoints.
    """
    phi, single = _noise_batchify(noise)
    scale = max(float(np.max(np.abs(phi))), 1e-300)
    if np.max(np.abs(phi.imag)) > 1e-12 * scale:
        raise ValidationError("unitary propagation requires real noise")
    if not all(family.hermitian):
        raise ValidationError("unitary propagation requires Hermitian channels")
    phi = phi.real
    psi0 = as_state(psi0)
    b, j, n = phi.shape
    grid = family.grid
    if n != grid.n_points or j != family.n_channels:
        raise ValidationError("noise shape does not match family grid/channels")

    path = np.empty((b, n, family.dim), dtype=complex)
    path[:, 0] = psi0
    psi = np.broadcast_to(psi0, (b, family.dim)).copy()
    for step in range(grid.n_steps):
        coeff = (phi[:, :, step] + phi[:, :, step + 1]) / 2  # (b, J)
        drive = np.einsum("bj,jde->bde", coeff,
                          (family.ops[:, step] + family.ops[:, step + 1]) / 2)
        u = expm_batch(-1j * grid.dt * drive)
        psi = np.einsum("bde,be->bd", u, psi)
        path[:, step + 1] = psi
    return path[0] if single else path


class CommutingPropagator:
    """Closed-form Green operator in the joint eigenbasis of a commuting family.

    The deterministic counter-term paths are computed once per eigenvector;
    per-trajectory work reduces to cumulative trapezoids of the noise.
    """

    def __init__(self, family: HeisenbergFamily, kernels: DiscretizedKernels,
                 commutation_rtol: float = COMMUTATION_RTOL):
        if kernels.grid is not family.grid and not np.allclose(
                kernels.grid.times, family.grid.times, atol=1e-12):
            raise ValidationError("kernel grid does not match family grid")
        if kernels.channels != family.n_channels:
            raise ValidationError("kernel channel count does not match the family")
        if not all(family.hermitian):
            raise ValidationError("the commuting engine requires Hermitian channels")
        self.family = family
        self.kernels = kernels
        self.grid = family.grid
        d = family.dim

        flat = family.ops.reshape(-1, d, d)
        self._check_commuting(flat, commutation_rtol)
        self.basis = self._joint_eigenbasis(flat)

        # eigenvalue paths a_j(t_n) per joint eigenvector
        diag = np.einsum("av,jnab,bv->jnv", self.basis.conj(), family.ops, self.basis)
        if np.max(np.abs(diag.imag)) > 1e-8 * max(float(np.max(np.abs(diag))), 1e-300):
            raise ValidationError("joint eigenvalues are not real; channels not Hermitian?")
        self.eigenpaths = diag.real  # (J, N, d)

        k4 = (kernels.d_values - kernels.s_values).reshape(
            kernels.channels, self.grid.n_points, kernels.channels, self.grid.n_points)
        self.counterterms = self._counterterm_paths(k4)  # (N, d)

    @staticmethod
    def _check_commuting(flat: np.ndarray, rtol: float) -> None:
        m = flat.shape[0]
        scales = np.abs(flat).max(axis=(1, 2))
        scales = np.where(scales > 0, scales, 1.0)
        worst = 0.0
        chunk = max(1, 4_000_000 // max(1, m * flat.shape[1] ** 2))
        for lo in range(0, m, chunk):
            hi = min(m, lo + chunk)
            comm = np.einsum("pab,qbc->pqac", flat[lo:hi], flat) \
                 - np.einsum("qab,pbc->pqac", flat, flat[lo:hi])
            rel = np.abs(comm).max(axis=(2, 3)) / np.outer(scales[lo:hi], scales)
            worst = max(worst, float(rel.max()))
        if worst > rtol:
            raise CommutationError(worst, rtol)

    @staticmethod
    def _joint_eigenbasis(flat: np.ndarray) -> np.ndarray:
        d = flat.shape[-1]
        scale = max(float(np.abs(flat).max()), 1e-300)
        for seed in _BASIS_SEEDS:
            rng = np.random.default_rng(seed)
            combo = np.einsum("p,pab->ab", rng.standard_normal(flat.shape[0]), flat)
            _, v = np.linalg.eigh((combo + combo.conj().T) / 2)
            rotated = np.einsum("av,pab,bw->pvw", v.conj(), flat, v)
            off = rotated.copy()
            off[:, np.arange(d), np.arange(d)] = 0.0
            if np.max(np.abs(off)) <= 1e-8 * scale:
                return v
        raise ValidationError("failed to find a joint eigenbasis for the commuting family")

    def _counterterm_paths(self, k4: np.ndarray) -> np.ndarray:
        n = self.grid.n_points
        d = self.eigenpaths.shape[-1]
        dt = self.grid.dt
        ct = np.empty((n, d), dtype=complex)
        for v in range(d):
            a = self.eigenpaths[:, :, v]  # (J, N)
            m = np.einsum("jn,jnkm,km->nm", a, k4, a)
            partial = np.take_along_axis(
                np.cumsum(m, axis=1), np.arange(n)[:, None], axis=1).ravel()
            inner = dt * (partial - 0.5 * m[:, 0] - 0.5 * np.diagonal(m))
            ct[:, v] = _cumtrapz(inner, dt)
        return ct

    def amplitude_factors(self, noise: np.ndarray) -> np.ndarray:
        """exp(-i Phi_v(t) - CT_v(t)) per trajectory, (b, N, d)."""
        phase = np.einsum("bjn,jnv->bnv", noise, self.eigenpaths)
        phi = _cumtrapz(phase, self.grid.dt, axis=1)
        return np.exp(-1j * phi - self.counterterms[None])

    def propagate(self, noise, psi0) -> np.ndarray:
        phi, single = _noise_batchify(noise)
        psi0 = as_state(psi0)
        amps0 = self.basis.conj().T @ psi0
        factors = self.amplitude_factors(phi) * amps0[None, None, :]
        states = np.einsum("dv,bnv->bnd", self.basis, factors)
        return states[0] if single else states

    def frames(self, noise) -> np.ndarray:
        """Green operators G_t as matrices, (b, N, d, d); columns are propagated basis states."""
        phi, single = _noise_batchify(noise)
        factors = self.amplitude_factors(phi)
        g = np.einsum("iv,bnv,jv->bnij", self.basis, factors, self.basis.conj())
        return g[0] if single else g


def propagate_commuting(family: HeisenbergFamily, kernels: DiscretizedKernels,
                        noise, psi0) -> np.ndarray:
    return CommutingPropagator(family, kernels).propagate(noise, psi0)


def _multi_indices(n_modes: int, depth: int) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []

    def rec(prefix: tuple[int, ...], modes_left: int, budget: int):
        if modes_left == 0:
            out.append(prefix)
            return
        for v in range(budget + 1):
            rec(prefix + (v,), modes_left - 1, budget - v)

    rec((), n_modes, depth)
    return out


class HierarchyPropagator:
    """Auxiliary-state recursion for memory kernels K = D - S in exponential form.

    For K_jk(t, s) = sum_mu g_mu e^{-lam_mu (t-s)} on channel pairs
    (j_mu, k_mu), the coupled linear system over multi-indices n is

        d/dt psi^(n) = -i sum_j A_j(t) phi_j(t) psi^(n) - (n . lam) psi^(n)
                       - i sum_mu n_mu A_{k_mu}(t) psi^(n - e_mu)
                       - i sum_mu g_mu A_{j_mu}(t) psi^(n + e_mu)

    truncated at |n| <= depth, psi^(0)(0) = psi0. RK4 stepping with the noise
    held at its per-step trapezoidal average.
    """

    def __init__(self, family: HeisenbergFamily, memory: PronySum, depth: int,
                 index_cap: int = 20000):
        if not isinstance(memory, PronySum):
            raise KernelRoutingError(
                "the hierarchy engine needs the memory kernel in exponential-sum "
                "form; fit it with kernels.prony_fit")
        if memory.channels != family.n_channels:
            raise ValidationError("memory kernel channels do not match the family")
        if depth < 1:
            raise ValidationError("hierarchy depth must be >= 1")
        self.family = family
        self.grid = family.grid
        self.depth = depth
        terms = memory.terms
        self.n_modes = len(terms)
        lam = np.array([t.rate for t in terms], dtype=complex)
        g = np.array([t.weight for t in terms], dtype=complex)

        indices = _multi_indices(self.n_modes, depth)
        if len(indices) > index_cap:
            raise DimensionCapError(len(indices), index_cap, "hierarchy index count")
        self.indices = indices
        index_map = {idx: p for p, idx in enumerate(indices)}
        self.n_aux = len(indices)

        arr = np.array(indices, dtype=float) if self.n_modes else np.zeros((1, 0))
        self.lam_tot = arr @ lam if self.n_modes else np.zeros(self.n_aux, dtype=complex)

        j = family.n_channels
        conn = np.zeros((j, self.n_aux, self.n_aux), dtype=complex)
        for p, idx in enumerate(indices):
            for mu, term in enumerate(terms):
                if idx[mu] > 0:
                    src = index_map[idx[:mu] + (idx[mu] - 1,) + idx[mu + 1:]]
                    conn[term.k, p, src] += idx[mu]
                if sum(idx) < depth:
                    src = index_map[idx[:mu] + (idx[mu] + 1,) + idx[mu + 1:]]
                    conn[term.j, p, src] += term.weight
        self.connections = conn

        # coupling operators at RK4 stage times (grid points and midpoints)
        fine = np.empty(2 * self.grid.n_steps + 1)
        fine[0::2] = self.grid.times
        fine[1::2] = self.grid.times[:-1] + self.grid.dt / 2
        self.stage_ops = family.operators_at(fine)  # (J, 2*n_steps+1, d, d)

    def _rhs(self, stage: int, phi_cols: np.ndarray, state: np.ndarray) -> np.ndarray:
        """RHS in the flat layout: state (I, b*d), phi_cols (J, b*d)."""
        d = self.family.dim
        out = -self.lam_tot[:, None] * state
        for c in range(self.family.n_channels):
            y = self.connections[c] @ state
            y += phi_cols[c][None, :] * state
            z = y.reshape(-1, d) @ self.stage_ops[c, stage].T
            out -= 1j * z.reshape(state.shape)
        return out

    def propagate(self, noise, psi0) -> np.ndarray:
        phi, single = _noise_batchify(noise)
        psi0 = as_state(psi0)
        b = phi.shape[0]
        d = self.family.dim
        if phi.shape[1] != self.family.n_channels or phi.shape[2] != self.grid.n_points:
            raise ValidationError("noise shape does not match family grid/channels")
        psi = np.zeros((b, self.n_aux, d), dtype=complex)
        psi[:, 0] = psi0
        path = self._run(phi, psi)
        return path[0] if single else path

    def propagate_frames(self, noise) -> np.ndarray:
        """Propagate the full basis frame under shared noise, (b, N, d, d)."""
        phi, _ = _noise_batchify(noise)
        b = phi.shape[0]
        d = self.family.dim
        psi = np.zeros((b * d, self.n_aux, d), dtype=complex)
        for a in range(d):
            psi[a::d, 0, a] = 1.0
        phi_rep = np.repeat(phi, d, axis=0)
        path = self._run(phi_rep, psi)  # (b*d, N, d)
        frames = path.reshape(b, d, self.grid.n_points, d)
        return np.transpose(frames, (0, 2, 3, 1))  # [b, n, i, a] = component i of G|a>

    def _run(self, phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
        grid = self.grid
        b, _, d = psi.shape
        path = np.empty((b, grid.n_points, d), dtype=complex)
        path[:, 0] = psi[:, 0]
        # flat layout (I, b*d) keeps every RHS term a plain matmul
        state = np.ascontiguousarray(psi.transpose(1, 0, 2).reshape(self.n_aux, b * d))
        dt = grid.dt
        for step in range(grid.n_steps):
            phi_bar = (phi[:, :, step] + phi[:, :, step + 1]) / 2  # (b, J)
            phi_cols = np.repeat(phi_bar.T, d, axis=1)  # (J, b*d)
            k1 = self._rhs(2 * step, phi_cols, state)
            k2 = self._rhs(2 * step + 1, phi_cols, state + (dt / 2) * k1)
            k3 = self._rhs(2 * step + 1, phi_cols, state + (dt / 2) * k2)
            k4 = self._rhs(2 * step + 2, phi_cols, state + dt * k3)
            state = state + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            path[:, step + 1] = state[0].reshape(b, d)
        return path


def propagate_hierarchy(family: HeisenbergFamily, memory: PronySum, noise, psi0,
                        depth: int, index_cap: int = 20000) -> np.ndarray:
    return HierarchyPropagator(family, memory, depth, index_cap).propagate(noise, psi0)


def propagate_markovian_sse(
    family: HeisenbergFamily,
    dmat: TimeLocal,
    smat: TimeLocal | None,
    white_noise,
    psi0,
    psd_rtol: float = 1e-8,
) -> np.ndarray:
    """White-noise stochastic step for time-local kernels.

    psi_{n+1} = exp[(-i sum_j A_j phi_j - (1/2) sum_jk (D-S)_jk A_j A_k) dt] psi_n
    with per-step noise moments E[phi* phi] = D(t_n)/dt, E[phi phi] = S(t_n)/dt.
    """
    phi, single = _noise_batchify(white_noise)
    psi0 = as_state(psi0)
    grid = family.grid
    j = family.n_channels
    if phi.shape[1] != j or phi.shape[2] != grid.n_steps:
        raise ValidationError("white noise must have shape (batch, J, n_steps)")
    if dmat.channels != j or (smat is not None and smat.channels != j):
        raise ValidationError("time-local kernel channels do not match the family")

    b = phi.shape[0]
    path = np.empty((b, grid.n_points, family.dim), dtype=complex)
    path[:, 0] = psi0
    psi = np.broadcast_to(psi0, (b, family.dim)).copy()
    for n in range(grid.n_steps):
        t = grid.times[n]
        d_now = dmat.at(t)
        s_now = smat.at(t) if smat is not None else np.zeros_like(d_now)
        full = stacked_kernel(d_now, s_now)
        lo = float(np.linalg.eigvalsh((full + full.conj().T) / 2).min())
        scale = max(float(np.max(np.abs(np.diag(d_now).real))), 1e-300)
        if lo < -psd_rtol * scale:
            raise PSDCertificationError(lo, scale, f"time-local kernel at t={t:g}")
        ops_n = family.ops[:, n]
        drift = -0.5 * np.einsum("jk,jde,kef->df", d_now - s_now, ops_n, ops_n)
        drive = np.einsum("bj,jde->bde", phi[:, :, n], ops_n)
        u = expm_batch((drift[None] - 1j * drive) * grid.dt)
        psi = np.einsum("bde,be->bd", u, psi)
        path[:, n + 1] = psi
    return path[0] if single else path


def make_nonhermitian_channels(L) -> tuple[np.ndarray, np.ndarray, "callable"]:
    """Split an arbitrary coupling operator into two Hermitian channels.

    Returns (A1, A2, expand) with A1 = (L + L^dag)/2, A2 = (L - L^dag)/(2i),
    and ``expand`` mapping a scalar kernel spec to the rank-degenerate
    two-channel spec with blocks [[D, -iD], [iD, D]]. The induced block kernel
    is positive exactly when D is.
    """
    L = as_operator(L, "coupling operator")
    a1 = (L + L.conj().T) / 2
    a2 = (L - L.conj().T) / 2j
    return a1, a2, expand_nonhermitian_kernel


_QSD_BLOCK = np.array([[1.0, -1.0j], [1.0j, 1.0]], dtype=complex)


def expand_nonhermitian_kernel(spec):
    """Degenerate two-channel kernel [[D, -iD], [iD, D]] from a scalar kernel D."""
    if isinstance(spec, PronySum):
        if spec.channels != 1:
            raise ValidationError("expected a single-channel kernel spec")
        terms = []
        for t in spec.terms:
            for (j, k), factor in np.ndenumerate(_QSD_BLOCK):
                terms.append(PronyTerm(j, k, t.weight * factor, t.rate))
        return PronySum(2, tuple(terms))
    if isinstance(spec, StationarySpectrum):
        if spec.channels != 1:
            raise ValidationError("expected a single-channel kernel spec")
        vals = spec.values[:, 0, 0][:, None, None] * _QSD_BLOCK[None]
        return StationarySpectrum(spec.omegas, vals)
    if isinstance(spec, TabulatedKernel):
        if spec.channels != 1:
            raise ValidationError("expected a single-channel kernel spec")
        vals = spec.values[:, :, 0, 0][:, :, None, None] * _QSD_BLOCK[None, None]
        return TabulatedKernel(spec.times, vals)
    if isinstance(spec, TimeLocal):
        if spec.channels != 1:
            raise ValidationError("expected a single-channel kernel spec")
        if callable(spec.matrix):
            inner = spec.matrix
            return TimeLocal(lambda t: np.asarray(inner(t)).reshape(1, 1)[0, 0] * _QSD_BLOCK,
                             channels=2)
        return TimeLocal(spec.matrix[0, 0] * _QSD_BLOCK)
    raise ValidationError(f"cannot expand kernel spec of type {type(spec).__name__}")
