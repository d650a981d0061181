"""Two-time kernels: specification variants, discretization, and positivity.

A run is driven by two kernels on a common grid: the Hermitian correlation
D_jk(tau, s) and the complex symmetric pseudo-correlation S_jk(tau, s). This
module evaluates them into dense blocks indexed (channel, time) with flat
index a = j * n_points + n, certifies positivity of the stacked kernel
[[D, S], [S*, D*]], converts stationary spectra to kernels, and fits
stationary kernels by exponential sums for the hierarchy propagator.

Quadrature convention: trapezoidal weights on the uniform grid. The step
function at coincident times is realized as weight 1/2 on the diagonal of
time-ordered double sums.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import (
    KernelRoutingError,
    NyquistError,
    PronyFitError,
    PSDCertificationError,
    ValidationError,
)
from .hilbert import TimeGrid

PSD_RTOL_DEFAULT = 1e-8


@dataclass(frozen=True)
class PronyTerm:
    """One exponential term g * exp(-rate * (tau - s)) on channel pair (j, k), tau >= s."""

    j: int
    k: int
    weight: complex
    rate: complex

    def __post_init__(self):
        if self.rate.real < -1e-14:
            raise ValidationError(
                f"Prony rate must have nonnegative real part, got {self.rate}"
            )


@dataclass(frozen=True)
class PronySum:
    channels: int
    terms: tuple[PronyTerm, ...]

    def __post_init__(self):
        for t in self.terms:
            if not (0 <= t.j < self.channels and 0 <= t.k < self.channels):
                raise ValidationError(f"Prony term channels {(t.j, t.k)} out of range")

    def negated(self) -> "PronySum":
        return PronySum(self.channels, tuple(
            PronyTerm(t.j, t.k, -t.weight, t.rate) for t in self.terms))


def ou_kernel(weight: float = 1.0, rate: float = 1.0, channels: int = 1,
              channel: int = 0) -> PronySum:
    """Ornstein-Uhlenbeck kernel weight * exp(-rate * |tau - s|) on one channel."""
    return PronySum(channels, (PronyTerm(channel, channel, complex(weight), complex(rate)),))


@dataclass(frozen=True)
class StationarySpectrum:
    """Spectrum samples D~_jk(omega) on a frequency grid; (W,) and (W, J, J)."""

    omegas: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        omegas = np.asarray(self.omegas, dtype=float)
        values = np.asarray(self.values, dtype=complex)
        if values.ndim == 1:
            values = values[:, None, None]
        if omegas.ndim != 1 or values.shape[0] != omegas.size or values.shape[-1] != values.shape[-2]:
            raise ValidationError("spectrum needs omegas (W,) and values (W, J, J)")
        if omegas.size >= 2 and np.any(np.diff(omegas) <= 0):
            raise ValidationError("spectrum frequencies must be strictly increasing")
        object.__setattr__(self, "omegas", omegas)
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def require_psd(self, rtol: float = 1e-10) -> None:
        scale = max(float(np.max(np.abs(self.values))), 1e-300)
        for i, m in enumerate(self.values):
            if np.max(np.abs(m - m.conj().T)) > 1e-10 * scale:
                raise ValidationError(f"spectrum value at omega index {i} is not Hermitian")
            lo = float(np.linalg.eigvalsh((m + m.conj().T) / 2).min())
            if lo < -rtol * scale:
                raise PSDCertificationError(lo, scale, f"spectrum at omega={self.omegas[i]:g}")


@dataclass(frozen=True)
class TimeLocal:
    """Time-local (Markovian) kernel D_jk(t); constant matrix or callable t -> (J, J)."""

    matrix: object  # (J, J) array or callable
    channels: int = 0

    def __post_init__(self):
        if callable(self.matrix):
            if self.channels <= 0:
                raise ValidationError("callable TimeLocal kernel needs explicit channels")
            return
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("TimeLocal matrix must be square")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "channels", m.shape[0])

    def at(self, t: float) -> np.ndarray:
        if callable(self.matrix):
            return np.asarray(self.matrix(t), dtype=complex).reshape(self.channels, self.channels)
        return self.matrix


@dataclass(frozen=True)
class TabulatedKernel:
    """Kernel values on a time grid: times (N,), values (N, N, J, J)."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=complex)
        if values.ndim == 2:
            values = values[:, :, None, None]
        if values.shape[0] != times.size or values.shape[1] != times.size:
            raise ValidationError("tabulated kernel shape does not match its time grid")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def stationary_lags(self, rtol: float = 1e-8) -> np.ndarray:
        """Extract f_jk(t_n) = values[n, 0] after checking Toeplitz structure."""
        n = self.times.size
        scale = max(float(np.max(np.abs(self.values))), 1e-300)
        for off in range(n):
            diag = np.array([self.values[m + off, m] for m in range(n - off)])
            if np.max(np.abs(diag - diag[0])) > rtol * scale:
                raise ValidationError("tabulated kernel is not stationary")
        return np.array([self.values[m, 0] for m in range(n)])


KernelSpec = PronySum | StationarySpectrum | TimeLocal | TabulatedKernel


def spec_channels(spec: KernelSpec) -> int:
    return spec.channels


@dataclass(frozen=True)
class SChoice:
    """Selection of the symmetric kernel S: unitary (S=D), qsd (S=0),
    collapse (S=-D), or a custom spec."""

    tag: str
    custom: KernelSpec | None = None

    def __post_init__(self):
        if self.tag not in ("unitary", "qsd", "collapse", "custom"):
            raise ValidationError(f"unknown S choice {self.tag!r}")
        if (self.tag == "custom") != (self.custom is not None):
            raise ValidationError("custom S choice requires (only) a custom kernel spec")

    @staticmethod
    def unitary() -> "SChoice":
        return SChoice("unitary")

    @staticmethod
    def qsd() -> "SChoice":
        return SChoice("qsd")

    @staticmethod
    def collapse() -> "SChoice":
        return SChoice("collapse")


def preset_S(tag: str, d_spec: KernelSpec) -> KernelSpec:
    """Symmetric-kernel spec for a preset tag: S = D, 0, or -D.

    The unitary tag additionally requires a real D; that is checked where
    numbers exist, in :func:`discretize`.
    """
    if isinstance(d_spec, TimeLocal):
        raise KernelRoutingError("time-local kernels are handled by the Markovian engines")
    j = spec_channels(d_spec)
    if tag == "qsd":
        return PronySum(j, ())
    if tag == "unitary":
        return d_spec
    if tag == "collapse":
        if isinstance(d_spec, PronySum):
            return d_spec.negated()
        if isinstance(d_spec, StationarySpectrum):
            return StationarySpectrum(d_spec.omegas, -d_spec.values)
        if isinstance(d_spec, TabulatedKernel):
            return TabulatedKernel(d_spec.times, -d_spec.values)
    raise ValidationError(f"unknown S preset {tag!r}")


@dataclass
class DiscretizedKernels:
    """Kernels sampled on the grid, flat index a = j * n_points + n.

    ``d_values``/``s_values`` hold raw kernel samples (no quadrature weights);
    ``weights`` are the trapezoidal weights consumers apply. The weighted
    blocks of the double-integral quadrature are exposed as properties.
    """

    grid: TimeGrid
    channels: int
    d_values: np.ndarray  # (NJ, NJ) Hermitian
    s_values: np.ndarray  # (NJ, NJ) symmetric
    weights: np.ndarray  # (N,) trapezoidal
    psd_min_eigenvalue: float

    @property
    def d_block(self) -> np.ndarray:
        w = np.tile(self.weights, self.channels)
        return self.d_values * np.outer(w, w)

    @property
    def s_block(self) -> np.ndarray:
        w = np.tile(self.weights, self.channels)
        return self.s_values * np.outer(w, w)

    def kernel4(self, which: str = "d") -> np.ndarray:
        """Raw values reshaped to (J, N, J, N)."""
        n = self.grid.n_points
        j = self.channels
        v = self.d_values if which == "d" else self.s_values
        return v.reshape(j, n, j, n)

    def memory_values(self) -> np.ndarray:
        """K = D - S raw values, (NJ, NJ)."""
        return self.d_values - self.s_values


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.n_points, grid.dt)
    w[0] = w[-1] = grid.dt / 2
    return w


def _prony_values_ordered(spec: PronySum, times: np.ndarray) -> np.ndarray:
    """Raw term sum on the time-ordered half tau >= s (zero elsewhere), (NJ, NJ)."""
    n = times.size
    j = spec.channels
    lag = times[:, None] - times[None, :]
    lower = lag >= -1e-15  # tau >= s, includes the diagonal
    out = np.zeros((j * n, j * n), dtype=complex)
    for term in spec.terms:
        block = np.where(lower, term.weight * np.exp(-term.rate * np.where(lower, lag, 0.0)), 0.0)
        out[term.j * n:(term.j + 1) * n, term.k * n:(term.k + 1) * n] += block
    return out


def _tabulated_values(tab: TabulatedKernel, grid: TimeGrid) -> np.ndarray:
    if tab.times.size != grid.n_points or not np.allclose(tab.times, grid.times, atol=1e-12):
        raise ValidationError("tabulated kernel grid does not match the requested grid")
    return np.transpose(tab.values, (2, 0, 3, 1)).reshape(
        tab.channels * grid.n_points, tab.channels * grid.n_points)


def _evaluate_hermitian(spec: KernelSpec, grid: TimeGrid) -> np.ndarray:
    """Kernel samples with exact Hermitian symmetry: build tau >= s, reflect."""
    if isinstance(spec, PronySum):
        n = grid.n_points
        raw = _prony_values_ordered(spec, grid.times)
        strict = np.kron(np.ones((spec.channels, spec.channels)),
                         np.tril(np.ones((n, n)), k=-1)).astype(bool)
        diag_mask = np.kron(np.ones((spec.channels, spec.channels)), np.eye(n)).astype(bool)
        lower = np.where(strict, raw, 0.0)
        equal = np.where(diag_mask, raw, 0.0)
        return lower + lower.conj().T + (equal + equal.conj().T) / 2
    if isinstance(spec, StationarySpectrum):
        return _evaluate_hermitian(spectrum_to_kernel(spec, grid), grid)
    if isinstance(spec, TabulatedKernel):
        vals = _tabulated_values(spec, grid)
        return (vals + vals.conj().T) / 2
    raise KernelRoutingError("time-local kernels are handled by the Markovian engines")


def _evaluate_symmetric(spec: KernelSpec, grid: TimeGrid) -> np.ndarray:
    """Kernel samples with exact symmetry S_jk(tau,s) = S_kj(s,tau)."""
    if isinstance(spec, PronySum):
        n = grid.n_points
        raw = _prony_values_ordered(spec, grid.times)
        strict = np.kron(np.ones((spec.channels, spec.channels)),
                         np.tril(np.ones((n, n)), k=-1)).astype(bool)
        diag_mask = np.kron(np.ones((spec.channels, spec.channels)), np.eye(n)).astype(bool)
        lower = np.where(strict, raw, 0.0)
        equal = np.where(diag_mask, raw, 0.0)
        return lower + lower.T + (equal + equal.T) / 2
    if isinstance(spec, StationarySpectrum):
        return _evaluate_symmetric(spectrum_to_kernel(spec, grid), grid)
    if isinstance(spec, TabulatedKernel):
        vals = _tabulated_values(spec, grid)
        return (vals + vals.T) / 2
    raise KernelRoutingError("time-local kernels are handled by the Markovian engines")


def stacked_kernel(d_values: np.ndarray, s_values: np.ndarray) -> np.ndarray:
    top = np.hstack([d_values, s_values])
    bottom = np.hstack([s_values.conj(), d_values.conj()])
    return np.vstack([top, bottom])


def discretize(
    spec: KernelSpec,
    s_choice: SChoice,
    grid: TimeGrid,
    psd_rtol: float = PSD_RTOL_DEFAULT,
) -> DiscretizedKernels:
    """Sample D and S on the grid and certify positivity of [[D, S], [S*, D*]].

    Raises KernelRoutingError for time-local kernels and PSDCertificationError
    when the stacked kernel dips below -psd_rtol * (max diagonal of D).
    """
    if isinstance(spec, TimeLocal):
        raise KernelRoutingError("time-local kernels are handled by the Markovian engines")
    d_values = _evaluate_hermitian(spec, grid)
    scale = max(float(np.max(np.abs(np.diag(d_values).real))), 1e-300)

    if s_choice.tag == "unitary":
        if np.max(np.abs(d_values.imag)) > 1e-10 * scale:
            raise ValidationError("unitary S choice requires a real kernel D")
        s_values = d_values.real.astype(complex)
        d_values = s_values.copy()
    elif s_choice.tag == "qsd":
        s_values = np.zeros_like(d_values)
    elif s_choice.tag == "collapse":
        if np.max(np.abs(d_values.imag)) > 1e-10 * scale:
            raise ValidationError("collapse S choice requires a real kernel D")
        s_values = -d_values.real.astype(complex)
        d_values = (-s_values).copy()
    else:
        if spec_channels(s_choice.custom) != spec_channels(spec):
            raise ValidationError("custom S spec has a different channel count than D")
        s_values = _evaluate_symmetric(s_choice.custom, grid)

    full = stacked_kernel(d_values, s_values)
    min_eig = float(np.linalg.eigvalsh((full + full.conj().T) / 2).min())
    if min_eig < -psd_rtol * scale:
        raise PSDCertificationError(min_eig, scale, "stacked kernel [[D,S],[S*,D*]]")

    return DiscretizedKernels(
        grid=grid,
        channels=spec_channels(spec),
        d_values=d_values,
        s_values=s_values,
        weights=trapezoid_weights(grid),
        psd_min_eigenvalue=min_eig,
    )


@dataclass(frozen=True)
class PSDReport:
    min_eigenvalue: float
    scale: float
    tolerance: float
    accepted: bool


def validate_psd(k: DiscretizedKernels, tol: float = PSD_RTOL_DEFAULT) -> PSDReport:
    """Report-only positivity check of the stacked kernel."""
    full = stacked_kernel(k.d_values, k.s_values)
    min_eig = float(np.linalg.eigvalsh((full + full.conj().T) / 2).min())
    scale = max(float(np.max(np.abs(np.diag(k.d_values).real))), 1e-300)
    return PSDReport(min_eig, scale, tol, accepted=min_eig >= -tol * scale)


def spectrum_to_kernel(spec: StationarySpectrum, grid: TimeGrid) -> TabulatedKernel:
    """D_jk(tau, s) = (1/2pi) integral e^{-i omega (tau-s)} D~_jk(omega) d omega.

    Trapezoidal quadrature over the sampled frequency grid. Refuses when the
    frequency spacing cannot resolve oscillations over the grid span.
    """
    spec.require_psd()
    omegas = spec.omegas
    if omegas.size < 2:
        domega = 0.0
    else:
        domega = float(np.max(np.diff(omegas)))
    if domega * grid.t_max >= np.pi:
        raise NyquistError(domega, grid.t_max)

    wq = np.zeros(omegas.size)
    if omegas.size == 1:
        wq[:] = 1.0
    else:
        wq[1:] += np.diff(omegas) / 2
        wq[:-1] += np.diff(omegas) / 2
    lags = grid.times  # u >= 0
    phases = np.exp(-1j * np.outer(lags, omegas))  # (N, W)
    f_pos = np.einsum("uw,w,wjk->ujk", phases, wq, spec.values) / (2 * np.pi)

    return TabulatedKernel(grid.times, _toeplitz_from_lags(f_pos, grid.n_points))


def _toeplitz_from_lags(f_pos: np.ndarray, n: int) -> np.ndarray:
    """(N, N, J, J) kernel from nonnegative-lag samples, Hermitian reflection."""
    offsets = np.subtract.outer(np.arange(n), np.arange(n))
    values = f_pos[np.abs(offsets)].copy()
    neg = offsets < 0
    values[neg] = np.conj(np.swapaxes(f_pos[np.abs(offsets)], -1, -2))[neg]
    return values


def _matrix_pencil(samples: np.ndarray, dt: float, n_terms: int) -> np.ndarray:
    """Estimate decay rates of a sum of complex exponentials (matrix pencil)."""
    n = samples.size
    pencil = max(n_terms + 1, n // 2)
    y = np.array([samples[i:i + n - pencil] for i in range(pencil + 1)]).T
    y0 = y[:, :-1][:, :pencil]
    y1 = y[:, 1:][:, :pencil]
    u, s, vh = np.linalg.svd(y0, full_matrices=False)
    rank = min(n_terms, int(np.sum(s > s[0] * 1e-13))) if s.size else 0
    if rank == 0:
        return np.zeros(0, dtype=complex)
    u_r = u[:, :rank]
    s_r = s[:rank]
    v_r = vh[:rank].conj().T
    a = u_r.conj().T @ y1 @ v_r / s_r[None, :]
    z = np.linalg.eigvals(a)
    z = z[np.abs(z) > 1e-12]
    lam = -np.log(z) / dt
    return lam


@dataclass(frozen=True)
class PronyFit:
    prony: PronySum
    max_residual: float


def prony_fit(tab: TabulatedKernel, n_terms: int, tol: float | None = None) -> PronyFit:
    """Fit a stationary tabulated kernel by sums of decaying exponentials.

    Each channel pair (j, k) is fitted on the lag grid with up to n_terms
    exponentials; rates are clipped to Re >= 0 and weights refitted by least
    squares. Raises PronyFitError when a requested tolerance is missed.
    """
    lags_f = tab.stationary_lags()  # (N, J, J)
    times = tab.times
    if times.size < 2 * n_terms + 2:
        raise ValidationError("too few samples for the requested number of terms")
    dt = float(times[1] - times[0])
    if np.max(np.abs(np.diff(times) - dt)) > 1e-10 * dt:
        raise ValidationError("exponential fitting needs a uniform lag grid")

    j = tab.channels
    scale = max(float(np.max(np.abs(lags_f))), 1e-300)
    terms: list[PronyTerm] = []
    max_residual = 0.0
    for cj in range(j):
        for ck in range(j):
            f = lags_f[:, cj, ck]
            if np.max(np.abs(f)) <= 1e-14 * scale:
                continue
            lam = _matrix_pencil(f, dt, n_terms)
            lam = np.array([complex(max(l.real, 0.0), l.imag) for l in lam])
            if lam.size == 0:
                continue
            basis = np.exp(-np.outer(times, lam))
            weights, *_ = np.linalg.lstsq(basis, f, rcond=None)
            resid = float(np.max(np.abs(basis @ weights - f)))
            max_residual = max(max_residual, resid)
            for w, l in zip(weights, lam):
                if abs(w) > 1e-14 * scale:
                    terms.append(PronyTerm(cj, ck, complex(w), complex(l)))
    if tol is not None and max_residual > tol:
        raise PronyFitError(max_residual, tol)
    return PronyFit(PronySum(j, tuple(terms)), max_residual)


def load_kernel_csv(path, channels: int) -> TabulatedKernel:
    """Stationary kernel from CSV: columns t, then re/im per channel pair (row-major)."""
    rows = _read_numeric_csv(path, 1 + 2 * channels * channels)
    times = rows[:, 0]
    lags = rows[:, 1::2] + 1j * rows[:, 2::2]
    lags = lags.reshape(-1, channels, channels)
    return TabulatedKernel(times, _toeplitz_from_lags(lags, times.size))


def load_spectrum_csv(path, channels: int) -> StationarySpectrum:
    """Spectrum from CSV: columns omega, then re/im per channel pair (row-major)."""
    rows = _read_numeric_csv(path, 1 + 2 * channels * channels)
    omegas = rows[:, 0]
    vals = (rows[:, 1::2] + 1j * rows[:, 2::2]).reshape(-1, channels, channels)
    return StationarySpectrum(omegas, vals)


def _read_numeric_csv(path, expected_cols: int) -> np.ndarray:
    data = []
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(x) for x in row]
            except ValueError:
                if line_no == 1:
                    continue  # header
                raise ValidationError(f"{path}: non-numeric row at line {line_no}")
            if len(vals) != expected_cols:
                raise ValidationError(
                    f"{path}: expected {expected_cols} columns, got {len(vals)} at line {line_no}")
            data.append(vals)
    if not data:
        raise ValidationError(f"{path}: no data rows")
    return np.asarray(data, dtype=float)
