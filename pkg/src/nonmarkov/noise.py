"""Correlated complex Gaussian noise with prescribed (D, S) moments.

Writing phi = x + i y with real jointly Gaussian x, y, the targets
E[conj(phi_a) phi_b] = D_ab and E[phi_a phi_b] = S_ab pin the real
second moments:

    E[x x^T] = (Re D + Re S) / 2
    E[y y^T] = (Re D - Re S) / 2
    E[x y^T] = (Im D + Im S) / 2

(from Re D = Cxx + Cyy, Re S = Cxx - Cyy, Im D = Cxy - Cxy^T,
Im S = Cxy + Cxy^T). The stacked covariance of (x, y) is positive exactly
when the stacked kernel [[D, S], [S*, D*]] is, which :mod:`.kernels`
certifies up front.

Sampling is counter-based: trajectory i draws from a generator seeded with
(master_seed, i), so ensembles are pure functions of (seed, count, covariance)
and any trajectory can be regenerated in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PSDCertificationError, ValidationError
from .hilbert import TimeGrid
from .kernels import DiscretizedKernels, TimeLocal, stacked_kernel

JITTER_LADDER = (0.0, 1e-14, 1e-10)


@dataclass
class NoiseSample:
    """One realization phi[j][n] of the correlated processes (units of energy)."""

    grid: TimeGrid
    values: np.ndarray  # (J, N) complex

    @property
    def channels(self) -> int:
        return self.values.shape[0]


def build_real_covariance(k: DiscretizedKernels) -> np.ndarray:
    """Real covariance of the stacked vector (x, y) reproducing D and S exactly.

    Unweighted kernel values enter; quadrature weights are applied by
    consumers of the samples.
    """
    d = k.d_values
    s = k.s_values
    cxx = (d.real + s.real) / 2
    cyy = (d.real - s.real) / 2
    cxy = (d.imag + s.imag) / 2
    cov = np.block([[cxx, cxy], [cxy.T, cyy]])
    return (cov + cov.T) / 2


def _factor_covariance(cov: np.ndarray) -> np.ndarray:
    """Factor F with F F^T = cov.

    Components with (numerically) zero variance are excluded up front so they
    come out exactly zero; the active block goes through Cholesky with jitter
    escalation, then an eigenvalue-clipping fallback.
    """
    n = cov.shape[0]
    diag = np.diag(cov)
    scale = max(float(diag.max(initial=0.0)), 1e-300)
    active = diag > 1e-14 * scale
    f = np.zeros((n, n))
    if not active.any():
        return f
    sub = cov[np.ix_(active, active)]
    sub_scale = max(float(np.trace(sub)), 1e-300)
    fsub = None
    for eps in JITTER_LADDER:
        try:
            fsub = np.linalg.cholesky(sub + eps * sub_scale * np.eye(sub.shape[0]))
            break
        except np.linalg.LinAlgError:
            continue
    if fsub is None:
        w, v = np.linalg.eigh(sub)
        if w.min() < -1e-8 * max(float(w.max()), 1e-300):
            raise PSDCertificationError(float(w.min()), float(w.max()),
                                        "real noise covariance")
        fsub = v * np.sqrt(np.clip(w, 0.0, None))
    rows = np.where(active)[0]
    f[np.ix_(rows, rows)] = fsub
    return f


class NoiseSampler:
    """Factorized sampler for grid-correlated noise.

    The covariance factorization is computed once and shared; individual
    trajectories use disjoint deterministic streams.
    """

    def __init__(self, kernels: DiscretizedKernels, master_seed: int):
        self.grid = kernels.grid
        self.channels = kernels.channels
        self.master_seed = int(master_seed)
        self._cov = build_real_covariance(kernels)
        self._factor = _factor_covariance(self._cov)
        self._half = kernels.channels * kernels.grid.n_points

    @property
    def covariance(self) -> np.ndarray:
        return self._cov

    def normals(self, trajectory_index: int) -> np.ndarray:
        rng = np.random.default_rng([self.master_seed, int(trajectory_index)])
        return rng.standard_normal(2 * self._half)

    def sample(self, trajectory_index: int) -> NoiseSample:
        return NoiseSample(self.grid, self.sample_batch(trajectory_index, 1)[0])

    def sample_batch(self, start_index: int, count: int) -> np.ndarray:
        """Samples for trajectory indices start..start+count-1, (count, J, N)."""
        z = np.stack([self.normals(start_index + i) for i in range(count)])
        v = z @ self._factor.T
        phi = v[:, : self._half] + 1j * v[:, self._half:]
        return phi.reshape(count, self.channels, self.grid.n_points)


def sample(kernels: DiscretizedKernels, master_seed: int, trajectory_index: int,
           count: int = 1) -> np.ndarray:
    """Convenience wrapper: (count, J, N) samples starting at trajectory_index."""
    return NoiseSampler(kernels, master_seed).sample_batch(trajectory_index, count)


@dataclass(frozen=True)
class MomentReport:
    n_samples: int
    max_z_hermitian: float
    max_z_symmetric: float
    max_abs_mean: float
    threshold: float
    passed: bool


def moment_test(samples: np.ndarray, kernels: DiscretizedKernels,
                max_z: float = 5.0) -> MomentReport:
    """Compare empirical E[phi* phi] and E[phi phi] against D and S.

    z-scores are per entry, deviation over the estimated standard error of
    that entry's product mean. Requires at least 1000 samples.
    """
    flat = np.asarray(samples).reshape(samples.shape[0], -1)
    n = flat.shape[0]
    if n < 1000:
        raise ValidationError(f"moment test needs >= 1000 samples, got {n}")
    if flat.shape[1] != kernels.channels * kernels.grid.n_points:
        raise ValidationError("sample shape does not match the kernel grid")

    emp_d = flat.conj().T @ flat / n
    emp_s = flat.T @ flat / n
    p = np.abs(flat) ** 2
    second = p.T @ p / n  # E[|phi_a|^2 |phi_b|^2] for both moments

    def zscores(emp, target):
        var = np.clip(second - np.abs(emp) ** 2, 0.0, None)
        se = np.sqrt(var / n)
        dev = np.abs(emp - target)
        scale = max(float(np.max(np.abs(target))), 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, dev / np.where(se > 0, se, 1.0), np.where(dev <= 1e-12 * scale, 0.0, np.inf))
        return float(np.max(z))

    z_d = zscores(emp_d, kernels.d_values)
    z_s = zscores(emp_s, kernels.s_values)
    mean_abs = float(np.max(np.abs(flat.mean(axis=0))))
    return MomentReport(
        n_samples=n,
        max_z_hermitian=z_d,
        max_z_symmetric=z_s,
        max_abs_mean=mean_abs,
        threshold=max_z,
        passed=max(z_d, z_s) <= max_z,
    )


class WhiteNoiseSampler:
    """Per-step white noise for the Markovian SSE.

    Step n carries a J-vector with E[conj(phi) phi] = D(t_n)/dt and
    E[phi phi] = S(t_n)/dt; steps are independent.
    """

    def __init__(self, dmat: TimeLocal, smat: TimeLocal | None, grid: TimeGrid,
                 master_seed: int, psd_rtol: float = 1e-8):
        self.grid = grid
        self.master_seed = int(master_seed)
        self.channels = dmat.channels
        j = dmat.channels
        factors = []
        for n in range(grid.n_steps):
            t = grid.times[n]
            d = dmat.at(t)
            s = smat.at(t) if smat is not None else np.zeros((j, j), dtype=complex)
            full = stacked_kernel(d, s)
            lo = float(np.linalg.eigvalsh((full + full.conj().T) / 2).min())
            scale = max(float(np.max(np.abs(np.diag(d).real))), 1e-300)
            if lo < -psd_rtol * scale:
                raise PSDCertificationError(lo, scale, f"time-local kernel at t={t:g}")
            cxx = (d.real + s.real) / 2
            cyy = (d.real - s.real) / 2
            cxy = (d.imag + s.imag) / 2
            cov = np.block([[cxx, cxy], [cxy.T, cyy]]) / grid.dt
            factors.append(_factor_covariance((cov + cov.T) / 2))
            if not callable(dmat.matrix) and (smat is None or not callable(smat.matrix)):
                factors = factors * grid.n_steps
                break
        self._factors = factors

    def sample_batch(self, start_index: int, count: int) -> np.ndarray:
        """(count, J, n_steps) complex step noise."""
        j = self.channels
        out = np.empty((count, j, self.grid.n_steps), dtype=complex)
        for i in range(count):
            rng = np.random.default_rng([self.master_seed, int(start_index + i)])
            z = rng.standard_normal((self.grid.n_steps, 2 * j))
            for n, f in enumerate(self._factors):
                v = f @ z[n]
                out[i, :, n] = v[:j] + 1j * v[j:]
        return out


def dump_samples_csv(path, samples: np.ndarray, first_index: int = 0) -> None:
    """CSV audit dump: trajectory, channel, time index, re, im."""
    arr = np.asarray(samples)
    with open(path, "w") as fh:
        fh.write("trajectory,channel,time_index,re,im\n")
        for b in range(arr.shape[0]):
            for j in range(arr.shape[1]):
                for n in range(arr.shape[2]):
                    v = arr[b, j, n]
                    fh.write(f"{first_index + b},{j},{n},{v.real:.17e},{v.imag:.17e}\n")
