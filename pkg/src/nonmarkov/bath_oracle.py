"""Independent deterministic oracle: finite-mode bosonic bath embedding.

A stationary kernel is realized by a finite set of harmonic modes (both signs
of frequency) coupled linearly to the system channels, the joint state is
evolved unitarily from the bath vacuum, and the system is traced out. The
comparison contract with the stochastic engines always uses the bath's OWN
tabulated correlation function as the kernel on the Monte-Carlo side, so both
sides solve the identical model.

The joint basis is truncated both per mode (Fock cutoff) and globally (total
excitation number); at weak coupling from the vacuum the global cutoff is what
keeps many-mode baths inside the dimension budget. Convergence is certified
by doubling the cutoffs until the reduced state stops moving.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from .engines import DensitySeries
from .errors import DimensionCapError, PSDCertificationError, StepSizeError, ValidationError
from .hilbert import TimeGrid, as_operator, require_hermitian
from .kernels import StationarySpectrum, TabulatedKernel, _toeplitz_from_lags

DEFAULT_DIM_CAP = 4096


@dataclass
class BathSpec:
    """Discrete bosonic modes: frequencies (M,), couplings kappa (M, J), weights (M,).

    ``couplings[m, j]`` already absorbs sqrt(weight / 2 pi): the discrete
    correlation function is sum_m kappa_m kappa_m^dag exp(-i omega_m (tau-s)).
    """

    frequencies: np.ndarray
    couplings: np.ndarray
    weights: np.ndarray
    n_max: int = 1
    total_excitation_cap: int | None = None
    dim_cap: int = DEFAULT_DIM_CAP

    def __post_init__(self):
        freqs = np.asarray(self.frequencies, dtype=float)
        coup = np.asarray(self.couplings, dtype=complex)
        if coup.ndim == 1:
            coup = coup[:, None]
        w = np.asarray(self.weights, dtype=float)
        if freqs.ndim != 1 or coup.shape[0] != freqs.size or w.shape != freqs.shape:
            raise ValidationError("bath arrays must share the mode axis")
        if self.n_max < 1:
            raise ValidationError("Fock cutoff n_max must be >= 1")
        self.frequencies = freqs
        self.couplings = coup
        self.weights = w

    @property
    def n_modes(self) -> int:
        return self.frequencies.size

    @property
    def channels(self) -> int:
        return self.couplings.shape[1]

    def to_dict(self) -> dict:
        return {
            "frequencies": self.frequencies.tolist(),
            "couplings": np.stack([self.couplings.real, self.couplings.imag], -1).tolist(),
            "weights": self.weights.tolist(),
            "n_max": self.n_max,
            "total_excitation_cap": self.total_excitation_cap,
            "dim_cap": self.dim_cap,
        }

    @staticmethod
    def from_dict(doc: dict) -> "BathSpec":
        coup = np.asarray(doc["couplings"], dtype=float)
        return BathSpec(
            frequencies=np.asarray(doc["frequencies"], dtype=float),
            couplings=coup[..., 0] + 1j * coup[..., 1],
            weights=np.asarray(doc["weights"], dtype=float),
            n_max=int(doc.get("n_max", 1)),
            total_excitation_cap=doc.get("total_excitation_cap"),
            dim_cap=int(doc.get("dim_cap", DEFAULT_DIM_CAP)),
        )


def modes_from_spectrum(
    spectrum,
    n_modes: int,
    omega_range: tuple[float, float],
    channels: int = 1,
    n_max: int = 1,
    total_excitation_cap: int | None = None,
    dim_cap: int = DEFAULT_DIM_CAP,
    zero_lag_target: float | None = None,
) -> BathSpec:
    """Quadrature modes for a stationary spectrum on a uniform frequency grid.

    ``spectrum`` is a callable omega -> (J, J) Hermitian PSD matrix (scalars
    for J = 1) or a StationarySpectrum whose grid is resampled. Couplings come
    from the PSD square root of D~(omega_i) dw_i / 2 pi.

    ``zero_lag_target`` optionally rescales all couplings so the discrete
    kernel matches a known zero-lag trace exactly, compensating truncated
    spectral tails.
    """
    lo, hi = float(omega_range[0]), float(omega_range[1])
    if not hi > lo:
        raise ValidationError("omega range must be increasing")
    if n_modes < 2:
        raise ValidationError("need at least two modes")
    omegas = np.linspace(lo, hi, n_modes)
    dw = np.full(n_modes, (hi - lo) / (n_modes - 1))
    dw[0] /= 2
    dw[-1] /= 2

    if isinstance(spectrum, StationarySpectrum):
        sp = spectrum

        def spectrum_fn(w):
            vals = np.empty((sp.channels, sp.channels), dtype=complex)
            for a in range(sp.channels):
                for b in range(sp.channels):
                    vals[a, b] = np.interp(w, sp.omegas, sp.values[:, a, b].real) + \
                        1j * np.interp(w, sp.omegas, sp.values[:, a, b].imag)
            return vals
        channels = sp.channels
    else:
        spectrum_fn = spectrum

    coup_rows = []
    freq_rows = []
    weight_rows = []
    for i, w in enumerate(omegas):
        m = np.asarray(spectrum_fn(w), dtype=complex)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        require_hermitian(m, f"spectrum at omega={w:g}", atol=1e-10 * max(float(np.max(np.abs(m))), 1.0))
        evals, evecs = np.linalg.eigh((m + m.conj().T) / 2)
        scale = max(float(evals.max()), 1e-300)
        if evals.min() < -1e-10 * scale:
            raise PSDCertificationError(float(evals.min()), scale, f"spectrum at omega={w:g}")
        evals = np.clip(evals, 0.0, None)
        for l in range(m.shape[0]):
            if evals[l] <= 1e-14 * scale:
                continue
            kappa = np.sqrt(evals[l] * dw[i] / (2 * np.pi)) * evecs[:, l].conj()
            coup_rows.append(kappa)
            freq_rows.append(w)
            weight_rows.append(dw[i])
    if not coup_rows:
        coup_rows = [np.zeros(channels, dtype=complex)]
        freq_rows = [omegas[0]]
        weight_rows = [dw[0]]

    couplings = np.asarray(coup_rows, dtype=complex)
    if zero_lag_target is not None:
        disc_zero = float(np.einsum("mj,mj->", couplings, couplings.conj()).real)
        if disc_zero > 0:
            couplings = couplings * np.sqrt(zero_lag_target / disc_zero)

    return BathSpec(
        frequencies=np.asarray(freq_rows),
        couplings=couplings,
        weights=np.asarray(weight_rows),
        n_max=n_max,
        total_excitation_cap=total_excitation_cap,
        dim_cap=dim_cap,
    )


def bath_lags(bath: BathSpec, times: np.ndarray) -> np.ndarray:
    """Discrete-mode correlation at nonnegative lags, (N, J, J)."""
    phases = np.exp(-1j * np.outer(times, bath.frequencies))  # (N, M)
    return np.einsum("nm,mj,mk->njk", phases, bath.couplings, bath.couplings.conj())


def bath_kernel(bath: BathSpec, grid: TimeGrid) -> TabulatedKernel:
    """The bath's own correlation function tabulated on a grid (the MC-side kernel)."""
    lags = bath_lags(bath, grid.times)
    return TabulatedKernel(grid.times, _toeplitz_from_lags(lags, grid.n_points))


@dataclass
class CorrelationReport:
    max_abs_deviation: float
    scale: float
    tolerance: float
    passed: bool


def verify_correlation(bath: BathSpec, grid: TimeGrid, target,
                       tolerance: float = 0.02) -> CorrelationReport:
    """Compare the discrete-mode correlation against a target kernel.

    ``target`` is a callable of the lag u returning (J, J) (scalars for J=1)
    or a TabulatedKernel on the same grid.
    """
    mine = bath_lags(bath, grid.times)
    if isinstance(target, TabulatedKernel):
        other = target.stationary_lags()
    else:
        other = np.stack([np.atleast_2d(np.asarray(target(u), dtype=complex))
                          for u in grid.times])
    dev = float(np.max(np.abs(mine - other)))
    scale = max(float(np.max(np.abs(other))), 1e-300)
    return CorrelationReport(dev, scale, tolerance, passed=dev <= tolerance * scale)


def _bath_basis(bath: BathSpec, sys_dim: int) -> list[tuple[int, ...]]:
    cap = bath.total_excitation_cap
    if cap is None:
        cap = bath.n_max * bath.n_modes
    occupations: list[tuple[int, ...]] = []

    def rec(prefix: tuple[int, ...], modes_left: int, budget: int):
        if modes_left == 0:
            occupations.append(prefix)
            return
        for v in range(min(bath.n_max, budget) + 1):
            rec(prefix + (v,), modes_left - 1, budget - v)

    rec((), bath.n_modes, cap)
    if sys_dim * len(occupations) > bath.dim_cap:
        raise DimensionCapError(sys_dim * len(occupations), bath.dim_cap,
                                "joint Hilbert dimension")
    return occupations


def _bath_operators(bath: BathSpec, occupations: list[tuple[int, ...]]):
    """Sparse bath-side operators: diagonal energy and per-channel field quadratures."""
    nb = len(occupations)
    index = {occ: i for i, occ in enumerate(occupations)}
    energy = np.array([float(np.dot(occ, bath.frequencies)) for occ in occupations])
    h_bath = scipy.sparse.diags(energy).tocsr()

    fields = []
    for j in range(bath.channels):
        rows, cols, vals = [], [], []
        for p, occ in enumerate(occupations):
            for m in range(bath.n_modes):
                kappa = bath.couplings[m, j]
                if kappa == 0:
                    continue
                if occ[m] > 0:  # annihilation connects occ -> occ - e_m
                    target = occ[:m] + (occ[m] - 1,) + occ[m + 1:]
                    q = index[target]
                    amp = kappa * np.sqrt(occ[m])
                    rows.append(q)
                    cols.append(p)
                    vals.append(amp)
                    rows.append(p)  # creation is the conjugate transpose entry
                    cols.append(q)
                    vals.append(np.conj(amp))
        fields.append(scipy.sparse.csr_matrix(
            (np.asarray(vals, dtype=complex), (rows, cols)), shape=(nb, nb)))
    return h_bath, fields


def evolve_joint(
    H,
    channels,
    bath: BathSpec,
    state0,
    grid: TimeGrid,
    picture: str = "interaction",
    substeps: int | None = None,
    norm_drift_bound: float = 1e-8,
) -> DensitySeries:
    """Unitary system+bath evolution from the bath vacuum, reduced to the system.

    The joint Hamiltonian is H (x) 1 + 1 (x) sum_m omega_m b_m^dag b_m +
    sum_j A_j (x) Phi_j with Phi_j = sum_m (kappa_m^j b_m + h.c.). RK4 stepping
    with automatic substeps; refuses if the joint norm drifts beyond bound.

    ``state0`` may be a pure system vector or a density matrix (propagated by
    eigencomponents). The returned series is rotated to the interaction
    picture unless picture="schroedinger".
    """
    H = require_hermitian(as_operator(H, "hamiltonian"), "hamiltonian")
    chans = [as_operator(a, f"channel {j}") for j, a in enumerate(channels)]
    if len(chans) != bath.channels:
        raise ValidationError("channel count does not match the bath couplings")
    d = H.shape[0]
    occupations = _bath_basis(bath, d)
    nb = len(occupations)
    h_bath, fields = _bath_operators(bath, occupations)

    eye_s = scipy.sparse.identity(d, format="csr")
    eye_b = scipy.sparse.identity(nb, format="csr")
    h_total = scipy.sparse.kron(scipy.sparse.csr_matrix(H), eye_b) \
        + scipy.sparse.kron(eye_s, h_bath)
    for a, f in zip(chans, fields):
        h_total = h_total + scipy.sparse.kron(scipy.sparse.csr_matrix(a), f)
    h_total = h_total.tocsr()

    if substeps is None:
        h_norm = float(np.abs(h_total).sum(axis=1).max())
        substeps = max(1, int(np.ceil(grid.dt * h_norm / 0.1)))
    dt_sub = grid.dt / substeps

    state0_arr = np.asarray(state0, dtype=complex)
    if state0_arr.ndim == 1:
        components = [(1.0, state0_arr)]
    else:
        from .engines import decompose_density
        components = decompose_density(state0_arr)

    vac = occupations.index(tuple(0 for _ in range(bath.n_modes)))
    rho_out = np.zeros((grid.n_points, d, d), dtype=complex)
    for weight, sys_vec in components:
        psi = np.zeros(d * nb, dtype=complex)
        psi[np.arange(d) * nb + vac] = sys_vec / np.linalg.norm(sys_vec)
        rho_out[0] += weight * _reduced(psi, d, nb)
        for n in range(grid.n_steps):
            for _ in range(substeps):
                k1 = -1j * (h_total @ psi)
                k2 = -1j * (h_total @ (psi + dt_sub / 2 * k1))
                k3 = -1j * (h_total @ (psi + dt_sub / 2 * k2))
                k4 = -1j * (h_total @ (psi + dt_sub * k3))
                psi = psi + dt_sub / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            drift = abs(np.linalg.norm(psi) - 1.0)
            if drift > norm_drift_bound:
                raise StepSizeError(drift, norm_drift_bound)
            rho_out[n + 1] += weight * _reduced(psi, d, nb)

    series = DensitySeries(
        grid=grid, rho=rho_out, stderr=np.zeros((grid.n_points, d, d)),
        meta={"engine": "bath-oracle", "picture": "schroedinger",
              "n_modes": bath.n_modes, "n_max": bath.n_max,
              "total_excitation_cap": bath.total_excitation_cap,
              "joint_dim": d * nb, "substeps": substeps},
    )
    if picture == "interaction":
        from .engines import to_interaction_picture
        series = to_interaction_picture(series, H)
        series.meta["engine"] = "bath-oracle"
    return series


def _reduced(psi: np.ndarray, d: int, nb: int) -> np.ndarray:
    block = psi.reshape(d, nb)
    return block @ block.conj().T


@dataclass
class CutoffReport:
    n_max_values: list
    cap_values: list
    changes: list
    converged: bool
    series: DensitySeries = field(repr=False, default=None)


def converge_cutoff(H, channels, bath: BathSpec, state0, grid: TimeGrid,
                    change_tol: float = 1e-4, max_rounds: int = 4,
                    picture: str = "interaction") -> CutoffReport:
    """Double the Fock and total-excitation cutoffs until the reduced state settles."""
    n_max = bath.n_max
    cap = bath.total_excitation_cap if bath.total_excitation_cap is not None else n_max
    prev = None
    n_vals, cap_vals, changes = [], [], []
    for _ in range(max_rounds):
        trial = BathSpec(bath.frequencies, bath.couplings, bath.weights,
                         n_max=n_max, total_excitation_cap=cap, dim_cap=bath.dim_cap)
        series = evolve_joint(H, channels, trial, state0, grid, picture=picture)
        n_vals.append(n_max)
        cap_vals.append(cap)
        if prev is not None:
            change = float(np.max(np.abs(series.rho - prev.rho)))
            changes.append(change)
            if change < change_tol:
                return CutoffReport(n_vals, cap_vals, changes, True, series)
        prev = series
        n_max = 2 * n_max
        cap = cap + 1
    return CutoffReport(n_vals, cap_vals, changes, False, prev)
