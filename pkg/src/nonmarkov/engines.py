"""Master-equation reconstruction and verification engines.

Monte-Carlo reconstruction of the evolution map from trajectory ensembles
(density series, Choi series, CP/TP certificates), deterministic Lindblad and
rotating-wave solvers, the closed-form commuting-class density, and the
Markov-limit convergence sweep.

Vectorization convention (single source of truth): column stacking,
vec(X) = X.flatten(order='F'), so vec(A X B) = kron(B.T, A) vec(X).
Superoperator matrices in this package always use it.

Picture bookkeeping: stochastic engines and the commuting closed form produce
interaction-picture densities (the system Hamiltonian lives inside the
Heisenberg coupling operators). ``lindblad_generator`` is the standard
Schroedinger-picture generator including the Hamiltonian commutator; the two
coincide whenever the Hamiltonian commutes with every channel or is zero,
which covers every deterministic-versus-stochastic comparison made here.
``to_interaction_picture`` rotates a Schroedinger-picture series when needed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .hilbert import (
    HeisenbergFamily,
    TimeGrid,
    as_operator,
    bohr_decomposition,
    heisenberg_evolve,
    require_hermitian,
)
from .kernels import (
    DiscretizedKernels,
    PronySum,
    PronyTerm,
    SChoice,
    TimeLocal,
    discretize,
    trapezoid_weights,
)
from .noise import NoiseSampler, WhiteNoiseSampler, dump_samples_csv
from .trajectories import (
    CommutingPropagator,
    HierarchyPropagator,
    TrajectoryConfig,
    TrajectoryEnsemble,
    propagate_markovian_sse,
    propagate_unitary,
)

__version_tag__ = "nonmarkov-0.1.0"


# ---------------------------------------------------------------------------
# vectorization helpers (column stacking)
# ---------------------------------------------------------------------------

def vec(matrix: np.ndarray) -> np.ndarray:
    return np.asarray(matrix).flatten(order="F")


def unvec(vector: np.ndarray, dim: int | None = None) -> np.ndarray:
    v = np.asarray(vector).reshape(-1)
    d = dim or int(round(np.sqrt(v.size)))
    return v.reshape(d, d, order="F")


def left_right_superop(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Matrix of rho -> left @ rho @ right."""
    return np.kron(right.T, left)


def trace_distance(rho1: np.ndarray, rho2: np.ndarray) -> float:
    delta = np.asarray(rho1) - np.asarray(rho2)
    delta = (delta + delta.conj().T) / 2
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(delta))))


# ---------------------------------------------------------------------------
# series containers
# ---------------------------------------------------------------------------

@dataclass
class DensitySeries:
    grid: TimeGrid
    rho: np.ndarray  # (N, d, d)
    stderr: np.ndarray  # (N, d, d) real, per-entry standard error of the mean
    n_trajectories: int | None = None
    trace_mean: np.ndarray | None = None
    trace_stderr: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.trace_mean is None:
            self.trace_mean = np.einsum("nii->n", self.rho).real
        if self.trace_stderr is None:
            self.trace_stderr = np.zeros(self.grid.n_points)

    @property
    def dim(self) -> int:
        return self.rho.shape[-1]


@dataclass
class ChoiSeries:
    """Choi matrices C(t) = sum_ab |a><b| (x) E[G|a><b|G^dag], index (a, i) = a*d + i."""

    grid: TimeGrid
    choi: np.ndarray  # (N, d^2, d^2)
    stderr: np.ndarray  # (N, d^2, d^2) real
    n_trajectories: int
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.choi.shape[-1])))


def to_interaction_picture(series: DensitySeries, H: np.ndarray) -> DensitySeries:
    """Rotate a Schroedinger-picture series: rho_int(t) = U(t)^dag rho(t) U(t)."""
    H = require_hermitian(as_operator(H, "hamiltonian"), "hamiltonian")
    w, v = np.linalg.eigh(H)
    phases = np.exp(1j * np.outer(series.grid.times, w))  # U^dag = V e^{+iwt} V^dag
    rot = np.einsum("ab,nb,cb->nac", v, phases, v.conj())
    rho = np.einsum("nab,nbc,ndc->nad", rot, series.rho, rot.conj())
    return DensitySeries(series.grid, rho, series.stderr.copy(),
                         series.n_trajectories, series.trace_mean,
                         series.trace_stderr,
                         dict(series.meta, picture="interaction"))


# ---------------------------------------------------------------------------
# Monte-Carlo density reconstruction
# ---------------------------------------------------------------------------

def decompose_density(rho0: np.ndarray, atol: float = 1e-12) -> list[tuple[float, np.ndarray]]:
    """Eigendecompose a density matrix into weighted pure components."""
    rho0 = as_operator(rho0, "initial density")
    require_hermitian(rho0, "initial density", atol=1e-10)
    tr = float(np.trace(rho0).real)
    if abs(tr - 1.0) > 1e-8:
        raise ValidationError(f"initial density must have unit trace, got {tr!r}")
    w, v = np.linalg.eigh(rho0)
    if w.min() < -1e-10:
        raise ValidationError(f"initial density is not positive (min eig {w.min():.3e})")
    return [(float(p), v[:, i].copy()) for i, p in enumerate(w) if p > atol]


def _as_components(rho0) -> list[tuple[float, np.ndarray]]:
    arr = np.asarray(rho0, dtype=complex)
    if arr.ndim == 1:
        norm = np.linalg.norm(arr)
        if abs(norm - 1.0) > 1e-12:
            raise ValidationError("initial state vector must have unit norm")
        return [(1.0, arr)]
    return decompose_density(arr)


class _MeanAccumulator:
    """Streaming mean and per-entry standard error over trajectories."""

    def __init__(self, shape):
        self.n = 0
        self.sum1 = np.zeros(shape, dtype=complex)
        self.sum2 = np.zeros(shape, dtype=float)

    def add(self, batch: np.ndarray) -> None:
        self.n += batch.shape[0]
        self.sum1 += batch.sum(axis=0)
        self.sum2 += (np.abs(batch) ** 2).sum(axis=0)

    def mean(self) -> np.ndarray:
        return self.sum1 / self.n

    def stderr(self) -> np.ndarray:
        m = self.mean()
        var = np.clip(self.sum2 / self.n - np.abs(m) ** 2, 0.0, None)
        return np.sqrt(var / self.n)


def _frame_batch(engine: str, propagator, family, noise, white_noise=None) -> np.ndarray:
    """Propagate the basis frame under shared noise, (b, N, d, d), [.., i, a]."""
    d = family.dim
    if engine == "commuting":
        return propagator.frames(noise)
    if engine == "hierarchy":
        return propagator.propagate_frames(noise)
    cols = []
    basis = np.eye(d, dtype=complex)
    for a in range(d):
        if engine == "unitary":
            cols.append(propagate_unitary(family, noise, basis[a]))
        else:
            cols.append(propagate_markovian_sse(family, propagator[0], propagator[1],
                                                white_noise, basis[a]))
    return np.stack(cols, axis=-1)  # (b, N, d, a)


def _make_propagator(engine: str, family, kernels, memory, depth, index_cap,
                     dmat=None, smat=None):
    if engine == "commuting":
        return CommutingPropagator(family, kernels)
    if engine == "hierarchy":
        return HierarchyPropagator(family, memory, depth, index_cap)
    if engine == "markov_sse":
        return (dmat, smat)
    return None


def _propagate_batch(engine: str, propagator, family, noise, psi0, white_noise=None):
    if engine == "commuting":
        return propagator.propagate(noise, psi0)
    if engine == "hierarchy":
        return propagator.propagate(noise, psi0)
    if engine == "unitary":
        return propagate_unitary(family, noise, psi0)
    return propagate_markovian_sse(family, propagator[0], propagator[1], white_noise, psi0)


def run_density(
    family: HeisenbergFamily,
    kernels: DiscretizedKernels | None,
    config: TrajectoryConfig,
    rho0,
    memory: PronySum | None = None,
    dmat: TimeLocal | None = None,
    smat: TimeLocal | None = None,
    dump_noise_path=None,
    dump_paths_path=None,
) -> DensitySeries:
    """Monte-Carlo density series: rho(t) = sum_a p_a E[|psi_a(t)><psi_a(t)|].

    Mixed initial states are eigendecomposed; every pure component is
    propagated under the same noise realization per trajectory.
    """
    components = _as_components(rho0)
    grid = config.grid
    d = family.dim
    n_points = grid.n_points

    engine = config.engine
    propagator = _make_propagator(engine, family, kernels, memory,
                                  config.hierarchy_depth, config.index_cap, dmat, smat)
    if engine == "markov_sse":
        sampler = WhiteNoiseSampler(dmat, smat, grid, config.master_seed)
    else:
        sampler = NoiseSampler(kernels, config.master_seed)

    acc = _MeanAccumulator((n_points, d, d))
    tr_acc = _MeanAccumulator((n_points,))
    dumped_noise = [] if dump_noise_path else None
    dumped_paths = [] if dump_paths_path else None

    for start in range(0, config.n_trajectories, config.chunk_size):
        count = min(config.chunk_size, config.n_trajectories - start)
        if engine == "markov_sse":
            white = sampler.sample_batch(start, count)
            noise = None
        else:
            noise = sampler.sample_batch(start, count)
            white = None
        r = np.zeros((count, n_points, d, d), dtype=complex)
        for p, vec0 in components:
            states = _propagate_batch(engine, propagator, family, noise, vec0, white)
            r += p * np.einsum("bni,bnj->bnij", states, states.conj())
            if dumped_paths is not None:
                dumped_paths.append(states)
        acc.add(r)
        tr_acc.add(np.einsum("bnii->bn", r).real)
        if dumped_noise is not None:
            dumped_noise.append(noise if noise is not None else white)

    rho = acc.mean()
    rho[0] = sum(p * np.outer(v, v.conj()) for p, v in components)
    series = DensitySeries(
        grid=grid,
        rho=rho,
        stderr=acc.stderr(),
        n_trajectories=config.n_trajectories,
        trace_mean=tr_acc.mean().real,
        trace_stderr=tr_acc.stderr(),
        meta={"engine": engine, "master_seed": config.master_seed,
              "s_choice": config.s_choice.tag, "picture": "interaction"},
    )
    if dumped_noise is not None:
        dump_samples_csv(dump_noise_path, np.concatenate(dumped_noise, axis=0))
    if dumped_paths is not None:
        _dump_paths_csv(dump_paths_path, np.concatenate(dumped_paths, axis=0))
    return series


def mc_density(ensembles, weights=None) -> DensitySeries:
    """Density series from materialized ensembles (components share noise)."""
    if isinstance(ensembles, TrajectoryEnsemble):
        ensembles = [ensembles]
    weights = list(weights) if weights is not None else [1.0] * len(ensembles)
    if len(weights) != len(ensembles):
        raise ValidationError("one weight per ensemble required")
    base = ensembles[0]
    for e in ensembles[1:]:
        if e.states.shape != base.states.shape:
            raise ValidationError("ensembles must be aligned trajectory by trajectory")
    r = sum(p * np.einsum("bni,bnj->bnij", e.states, e.states.conj())
            for p, e in zip(weights, ensembles))
    acc = _MeanAccumulator(r.shape[1:])
    acc.add(r)
    tr = np.einsum("bnii->bn", r).real
    tr_acc = _MeanAccumulator((r.shape[1],))
    tr_acc.add(tr)
    return DensitySeries(
        grid=base.grid, rho=acc.mean(), stderr=acc.stderr(),
        n_trajectories=base.n_trajectories,
        trace_mean=tr_acc.mean().real, trace_stderr=tr_acc.stderr(),
        meta={"engine": "ensemble", "picture": "interaction"},
    )


def run_choi(
    family: HeisenbergFamily,
    kernels: DiscretizedKernels | None,
    config: TrajectoryConfig,
    memory: PronySum | None = None,
    dmat: TimeLocal | None = None,
    smat: TimeLocal | None = None,
) -> ChoiSeries:
    """Monte-Carlo Choi series; all basis states share each noise sample."""
    if config.n_trajectories < 100:
        raise ValidationError(
            f"Choi estimation needs >= 100 trajectories, got {config.n_trajectories}")
    grid = config.grid
    d = family.dim
    engine = config.engine
    propagator = _make_propagator(engine, family, kernels, memory,
                                  config.hierarchy_depth, config.index_cap, dmat, smat)
    if engine == "markov_sse":
        sampler = WhiteNoiseSampler(dmat, smat, grid, config.master_seed)
    else:
        sampler = NoiseSampler(kernels, config.master_seed)

    acc = _MeanAccumulator((grid.n_points, d * d, d * d))
    for start in range(0, config.n_trajectories, config.chunk_size):
        count = min(config.chunk_size, config.n_trajectories - start)
        if engine == "markov_sse":
            white = sampler.sample_batch(start, count)
            noise = None
        else:
            noise = sampler.sample_batch(start, count)
            white = None
        frames = _frame_batch(engine, propagator, family, noise, white)  # (b,N,i,a)
        w = np.transpose(frames, (0, 1, 3, 2)).reshape(count, grid.n_points, d * d)
        acc.add(np.einsum("bnp,bnq->bnpq", w, w.conj()))

    choi = acc.mean()
    return ChoiSeries(
        grid=grid, choi=choi, stderr=acc.stderr(),
        n_trajectories=config.n_trajectories,
        meta={"engine": engine, "master_seed": config.master_seed,
              "s_choice": config.s_choice.tag},
    )


mc_choi = run_choi


# ---------------------------------------------------------------------------
# CP / TP certification
# ---------------------------------------------------------------------------

@dataclass
class CPTPReport:
    times: np.ndarray
    tp_max_z: np.ndarray
    cp_min_eigenvalue: np.ndarray
    cp_threshold: np.ndarray
    tp_passed: bool
    cp_passed: bool

    @property
    def passed(self) -> bool:
        return self.tp_passed and self.cp_passed

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "tp_max_z": self.tp_max_z.tolist(),
            "cp_min_eigenvalue": self.cp_min_eigenvalue.tolist(),
            "cp_threshold": self.cp_threshold.tolist(),
            "tp_passed": self.tp_passed,
            "cp_passed": self.cp_passed,
            "passed": self.passed,
        }


def verify_cp_tp(choi: ChoiSeries, tol_sigma: float = 5.0) -> CPTPReport:
    """Per-time TP and CP diagnostics for a Choi series.

    TP compares the output partial trace with the identity entrywise in units
    of propagated standard error; CP checks the smallest eigenvalue against
    -tol_sigma times the Frobenius norm of the entry standard errors.
    """
    d = choi.dim
    n = choi.grid.n_points
    tp_z = np.zeros(n)
    cp_min = np.zeros(n)
    cp_thr = np.zeros(n)
    eye = np.eye(d)
    for t in range(n):
        c = choi.choi[t]
        se = choi.stderr[t]
        blocks = c.reshape(d, d, d, d)  # [(a,i),(b,j)]
        se_blocks = se.reshape(d, d, d, d)
        pt = np.einsum("aibi->ab", blocks)
        se_pt = np.sqrt(np.einsum("aibi->ab", se_blocks ** 2))
        dev = np.abs(pt - eye)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se_pt > 0, dev / np.where(se_pt > 0, se_pt, 1.0),
                         np.where(dev <= 1e-10 * d, 0.0, np.inf))
        tp_z[t] = float(z.max())
        lam_min = float(np.linalg.eigvalsh((c + c.conj().T) / 2).min())
        cp_min[t] = lam_min
        cp_thr[t] = tol_sigma * float(np.sqrt((se ** 2).sum())) + 1e-10 * d
    return CPTPReport(
        times=choi.grid.times,
        tp_max_z=tp_z,
        cp_min_eigenvalue=cp_min,
        cp_threshold=cp_thr,
        tp_passed=bool(np.all(tp_z <= tol_sigma)),
        cp_passed=bool(np.all(cp_min >= -cp_thr)),
    )


# ---------------------------------------------------------------------------
# Lindblad and rotating-wave generators
# ---------------------------------------------------------------------------

@dataclass
class LindbladSpec:
    """Markovian generator data: Hamiltonian, channels, rate matrix D(t), optional S(t)."""

    hamiltonian: np.ndarray
    channels: tuple
    dmatrix: TimeLocal
    smatrix: TimeLocal | None = None

    def __post_init__(self):
        h = as_operator(self.hamiltonian, "hamiltonian")
        require_hermitian(h, "hamiltonian")
        chans = tuple(as_operator(a, f"channel {i}") for i, a in enumerate(self.channels))
        if self.dmatrix.channels != len(chans):
            raise ValidationError("rate matrix size does not match the channel count")
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(self, "channels", chans)


def lindblad_generator(spec: LindbladSpec, t: float = 0.0, check_psd: bool = True) -> np.ndarray:
    """Vectorized generator (column stacking):

    L = -i[H, .] + sum_jk D_jk(t) (A_k . A_j^dag - (1/2){A_j^dag A_k, .})

    which for Hermitian channels is the standard rate-matrix Lindblad form.
    Trace preservation holds exactly: vec(I)^dag L = 0.
    """
    d = spec.hamiltonian.shape[0]
    dmat = spec.dmatrix.at(t)
    if check_psd:
        herm = (dmat + dmat.conj().T) / 2
        lo = float(np.linalg.eigvalsh(herm).min())
        scale = max(float(np.max(np.abs(dmat))), 1e-300)
        if lo < -1e-10 * scale:
            warnings.warn(f"rate matrix not PSD at t={t:g} (min eig {lo:.3e}); "
                          "integrating anyway", RuntimeWarning, stacklevel=2)
    eye = np.eye(d, dtype=complex)
    h = spec.hamiltonian
    gen = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
    for j, aj in enumerate(spec.channels):
        for k, ak in enumerate(spec.channels):
            djk = dmat[j, k]
            if djk == 0:
                continue
            ajd = aj.conj().T
            op = ajd @ ak
            gen += djk * (np.kron(aj.conj(), ak)
                          - 0.5 * np.kron(eye, op)
                          - 0.5 * np.kron(op.T, eye))
    return gen


def integrate_lindblad(spec: LindbladSpec, rho0, grid: TimeGrid) -> DensitySeries:
    """RK4 integration of d rho / dt = L(t) rho in vectorized form."""
    rho0 = as_operator(rho0, "initial density")
    d = rho0.shape[0]
    time_dependent = callable(spec.dmatrix.matrix)
    gen0 = lindblad_generator(spec, 0.0)

    def gen_at(t: float) -> np.ndarray:
        return lindblad_generator(spec, t, check_psd=False) if time_dependent else gen0

    r = vec(rho0).astype(complex)
    out = np.empty((grid.n_points, d, d), dtype=complex)
    out[0] = rho0
    dt = grid.dt
    for n in range(grid.n_steps):
        t = grid.times[n]
        l1 = gen_at(t)
        lmid = gen_at(t + dt / 2) if time_dependent else gen0
        l4 = gen_at(t + dt) if time_dependent else gen0
        k1 = l1 @ r
        k2 = lmid @ (r + dt / 2 * k1)
        k3 = lmid @ (r + dt / 2 * k2)
        k4 = l4 @ (r + dt * k3)
        r = r + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[n + 1] = unvec(r, d)
    return DensitySeries(
        grid=grid, rho=out, stderr=np.zeros((grid.n_points, d, d)),
        meta={"engine": "lindblad", "picture": "schroedinger"},
    )


def rwa_generator(H, channels, spectrum, cluster_rtol: float = 1e-9
                  ) -> tuple[LindbladSpec, np.ndarray]:
    """Stationary secular generator from Bohr components of the channels.

    ``spectrum`` maps a Bohr frequency to the Hermitian PSD rate matrix
    D~(omega): a callable, or a dict {omega: matrix-or-scalar} whose keys
    must cover every Bohr frequency.

    Returns the assembled stationary LindbladSpec (zero Hamiltonian; the
    generator acts in the interaction picture) and its superoperator matrix.
    """
    H = require_hermitian(as_operator(H, "hamiltonian"), "hamiltonian")
    chans = [as_operator(a, f"channel {j}") for j, a in enumerate(channels)]
    nch = len(chans)
    per_channel = [bohr_decomposition(H, a, cluster_rtol) for a in chans]

    freqs: list[float] = []
    for comps in per_channel:
        freqs.extend(w for w, _ in comps)
    freqs = sorted(set(freqs))
    w_eigs = np.linalg.eigvalsh(H)
    tol = cluster_rtol * max(float(w_eigs[-1] - w_eigs[0]), 1e-300)
    merged: list[float] = []
    for f in freqs:
        if not merged or f - merged[-1] > tol:
            merged.append(f)

    def comp_at(j: int, omega: float) -> np.ndarray:
        for w, c in per_channel[j]:
            if abs(w - omega) <= tol:
                return c
        return np.zeros_like(chans[0])

    def rate_at(omega: float) -> np.ndarray:
        if callable(spectrum):
            m = np.asarray(spectrum(omega), dtype=complex)
        else:
            key = next((k for k in spectrum if abs(k - omega) <= max(tol, 1e-12)), None)
            if key is None:
                raise ValidationError(
                    "spectrum values required at Bohr frequencies "
                    f"{[round(f, 12) for f in merged]}; missing {omega:g}")
            m = np.asarray(spectrum[key], dtype=complex)
        if m.ndim == 0:
            m = m * np.eye(nch)
        if m.shape != (nch, nch):
            raise ValidationError(f"spectrum at omega={omega:g} must be ({nch},{nch})")
        require_hermitian(m, f"spectrum at omega={omega:g}", atol=1e-10)
        lo = float(np.linalg.eigvalsh((m + m.conj().T) / 2).min())
        if lo < -1e-10 * max(float(np.max(np.abs(m))), 1e-300):
            raise ValidationError(f"spectrum at omega={omega:g} is not PSD")
        return m

    all_channels: list[np.ndarray] = []
    blocks: list[np.ndarray] = []
    for omega in merged:
        blocks.append(rate_at(omega))
        for j in range(nch):
            all_channels.append(comp_at(j, omega))
    dim_total = nch * len(merged)
    dmat = np.zeros((dim_total, dim_total), dtype=complex)
    for i, b in enumerate(blocks):
        dmat[i * nch:(i + 1) * nch, i * nch:(i + 1) * nch] = b

    spec = LindbladSpec(
        hamiltonian=np.zeros_like(chans[0]),
        channels=tuple(all_channels),
        dmatrix=TimeLocal(dmat),
    )
    return spec, lindblad_generator(spec)


# ---------------------------------------------------------------------------
# deterministic commuting-class density (Gaussian closed form)
# ---------------------------------------------------------------------------

def _square_trapezoid_path(q: np.ndarray, dt: float) -> np.ndarray:
    """T(m) = r_m^T q r_m for trapezoid weight vectors r_m over [0, t_m]."""
    u = np.cumsum(np.cumsum(q, axis=0), axis=1)
    full = np.diagonal(u)
    row0 = np.cumsum(q[0])
    col0 = np.cumsum(q[:, 0])
    rowm = np.diagonal(np.cumsum(q, axis=1))
    colm = np.diagonal(np.cumsum(q, axis=0))
    corners = q[0, 0] + q[0, :] + q[:, 0] + np.diagonal(q)
    return dt * dt * (full - 0.5 * (row0 + col0 + rowm + colm) + 0.25 * corners)


def commuting_density(family: HeisenbergFamily, kernels: DiscretizedKernels,
                      rho0) -> DensitySeries:
    """Exact (up to quadrature) density for commuting coupling families.

    The Gaussian average of the corrected Green operators has a closed form in
    the joint eigenbasis; the result depends only on D, not on S.
    """
    prop = CommutingPropagator(family, kernels)
    components = _as_components(rho0)
    rho0_mat = sum(p * np.outer(v, v.conj()) for p, v in components)
    v = prop.basis
    a = prop.eigenpaths  # (J, N, d)
    ct = prop.counterterms  # (N, d)
    grid = family.grid
    n = grid.n_points
    d = family.dim
    d4 = kernels.kernel4("d")
    s4 = kernels.kernel4("s")

    # self pseudo-correlation sums SS_v(m) = int int a_v a_v S
    ss = np.empty((n, d), dtype=complex)
    for vv in range(d):
        q = np.einsum("jn,jnkm,km->nm", a[:, :, vv], s4, a[:, :, vv])
        ss[:, vv] = _square_trapezoid_path(q, grid.dt)

    rho_tilde0 = v.conj().T @ rho0_mat @ v
    out = np.empty((n, d, d), dtype=complex)
    for va in range(d):
        for wb in range(d):
            q = np.einsum("jn,km,kmjn->nm", a[:, :, va], a[:, :, wb], d4)
            dd = _square_trapezoid_path(q, grid.dt)
            expo = dd - 0.5 * ss[:, va] - 0.5 * ss[:, wb].conj() \
                - ct[:, va] - ct[:, wb].conj()
            out[:, va, wb] = rho_tilde0[va, wb] * np.exp(expo)
    rho = np.einsum("av,nvw,bw->nab", v, out, v.conj())
    rho[0] = rho0_mat
    return DensitySeries(
        grid=grid, rho=rho, stderr=np.zeros((n, d, d)),
        meta={"engine": "commuting-closed-form", "picture": "interaction"},
    )


# ---------------------------------------------------------------------------
# Markov-limit sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarkovLimitScenario:
    """Commuting scenario for the time-local limit of the exponential kernel family."""

    hamiltonian: np.ndarray
    channels: tuple
    gamma: float
    rho0: np.ndarray
    t_final: float
    dt: float = 0.005


@dataclass
class MarkovLimitReport:
    lambdas: list
    distances: list
    ratios: list
    expected_ratios: list
    monotone: bool
    accepted: bool

    def to_dict(self) -> dict:
        return {
            "lambdas": list(self.lambdas),
            "distances": list(self.distances),
            "ratios": list(self.ratios),
            "expected_ratios": list(self.expected_ratios),
            "monotone": self.monotone,
            "accepted": self.accepted,
        }


def markov_limit_sweep(scenario: MarkovLimitScenario, lambdas,
                       ratio_band: tuple[float, float] = (2.5, 6.0)) -> MarkovLimitReport:
    """Distance of the memory-kernel result to the Lindblad limit per rate lambda.

    Kernel family D_lambda(tau, s) = (gamma lambda / 2) exp(-lambda |tau - s|);
    the distance to the Lindblad solution with rate matrix gamma must fall
    monotonically and scale like 1/lambda.
    """
    lambdas = sorted(float(l) for l in lambdas)
    n_steps = max(1, int(round(scenario.t_final / scenario.dt)))
    grid = TimeGrid(scenario.dt, n_steps)
    family = heisenberg_evolve(scenario.hamiltonian, scenario.channels, grid)
    j = family.n_channels

    lind_spec = LindbladSpec(
        hamiltonian=np.zeros_like(family.hamiltonian),
        channels=scenario.channels,
        dmatrix=TimeLocal(scenario.gamma * np.eye(j)),
    )
    lind = integrate_lindblad(lind_spec, scenario.rho0, grid)

    distances = []
    for lam in lambdas:
        spec = PronySum(j, tuple(
            PronyTerm(c, c, complex(scenario.gamma * lam / 2), complex(lam))
            for c in range(j)))
        kern = discretize(spec, SChoice.qsd(), grid)
        gme = commuting_density(family, kern, scenario.rho0)
        distances.append(trace_distance(gme.rho[-1], lind.rho[-1]))

    atol = 1e-12
    if max(distances) <= atol:
        return MarkovLimitReport(lambdas, distances, [], [], True, True)
    ratios = [distances[i] / max(distances[i + 1], 1e-300)
              for i in range(len(distances) - 1)]
    expected = [lambdas[i + 1] / lambdas[i] for i in range(len(lambdas) - 1)]
    monotone = all(distances[i] > distances[i + 1] for i in range(len(distances) - 1))
    accepted = monotone and all(ratio_band[0] <= r <= ratio_band[1] for r in ratios)
    return MarkovLimitReport(lambdas, distances, ratios, expected, monotone, accepted)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def _complex_nested(arr: np.ndarray):
    return np.stack([arr.real, arr.imag], axis=-1).tolist()


def density_to_json(series: DensitySeries, path=None, meta: dict | None = None) -> dict:
    doc = {
        "schema": "nonmarkov/density-series/1",
        "times": series.grid.times.tolist(),
        "dim": series.dim,
        "n_trajectories": series.n_trajectories,
        "rho": _complex_nested(series.rho),
        "stderr": series.stderr.tolist(),
        "trace_mean": series.trace_mean.tolist(),
        "trace_stderr": series.trace_stderr.tolist(),
        "meta": dict(series.meta, **(meta or {})),
    }
    if path is not None:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return doc


def density_to_csv(series: DensitySeries, path, meta: dict | None = None) -> None:
    d = series.dim
    header = ["time"]
    for i in range(d):
        for j in range(d):
            header += [f"re_{i}{j}", f"im_{i}{j}", f"se_{i}{j}"]
    with open(path, "w") as fh:
        for key, val in sorted({**series.meta, **(meta or {})}.items()):
            fh.write(f"# {key}={val}\n")
        fh.write(",".join(header) + "\n")
        for n in range(series.grid.n_points):
            row = [f"{series.grid.times[n]:.17e}"]
            for i in range(d):
                for j in range(d):
                    row += [f"{series.rho[n, i, j].real:.17e}",
                            f"{series.rho[n, i, j].imag:.17e}",
                            f"{series.stderr[n, i, j]:.17e}"]
            fh.write(",".join(row) + "\n")


def choi_to_json(series: ChoiSeries, path=None, meta: dict | None = None) -> dict:
    doc = {
        "schema": "nonmarkov/choi-series/1",
        "times": series.grid.times.tolist(),
        "dim": series.dim,
        "n_trajectories": series.n_trajectories,
        "choi": _complex_nested(series.choi),
        "stderr": series.stderr.tolist(),
        "meta": dict(series.meta, **(meta or {})),
    }
    if path is not None:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return doc


def choi_to_csv(series: ChoiSeries, path, meta: dict | None = None) -> None:
    dd = series.choi.shape[-1]
    with open(path, "w") as fh:
        for key, val in sorted({**series.meta, **(meta or {})}.items()):
            fh.write(f"# {key}={val}\n")
        fh.write("time,row,col,re,im,se\n")
        for n in range(series.grid.n_points):
            for p in range(dd):
                for q in range(dd):
                    fh.write(f"{series.grid.times[n]:.17e},{p},{q},"
                             f"{series.choi[n, p, q].real:.17e},"
                             f"{series.choi[n, p, q].imag:.17e},"
                             f"{series.stderr[n, p, q]:.17e}\n")


def _dump_paths_csv(path, states: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("trajectory,time_index,component,re,im\n")
        for b in range(states.shape[0]):
            for n in range(states.shape[1]):
                for i in range(states.shape[2]):
                    v = states[b, n, i]
                    fh.write(f"{b},{n},{i},{v.real:.17e},{v.imag:.17e}\n")
