"""Phasor measurement series, polar noise model, and preprocessing.

Measurement devices report magnitude and phase; noise is zero-mean Gaussian
in polar coordinates. Converting to Cartesian coordinates makes the noise
non-Gaussian with a small bias and a time-varying, per-sample 2x2 covariance.
This module provides the exact moment formulas (true-value and
measurement-conditioned), bias removal, the sparse block covariance of the
stacked real data vector, and the moving-average filter.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericalError, StructureError

# Device accuracy figures (magnitude as percent of rating, phase in radians).
MU_PMU_MAG_PCT = 0.01
MU_PMU_PHASE_RAD = 1e-4
PCLASS_MAG_PCT = 0.1
PCLASS_PHASE_RAD = 1.5e-3


@dataclass(frozen=True)
class NoiseSpec:
    """Polar noise standard deviations for the voltage and current channels.

    Magnitude stds are absolute (per-unit); phase stds are in radians.
    """

    sigma_mag_v: float = 0.0
    sigma_phase_v: float = 0.0
    sigma_mag_i: float = 0.0
    sigma_phase_i: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_mag_v", "sigma_phase_v", "sigma_mag_i", "sigma_phase_i"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @classmethod
    def uniform(cls, sigma: float, seed: int = 0) -> "NoiseSpec":
        """Equal std in magnitude and phase on both channels."""
        return cls(sigma, sigma, sigma, sigma, seed)

    @classmethod
    def from_accuracy(cls, mag_pct: float, phase_rad: float,
                      v_rating: float, i_rating: float, seed: int = 0) -> "NoiseSpec":
        """Build from device accuracy: magnitude std = percent x rating."""
        return cls(mag_pct / 100.0 * v_rating, phase_rad,
                   mag_pct / 100.0 * i_rating, phase_rad, seed)

    def filtered(self, window: int) -> "NoiseSpec":
        """Noise spec after averaging `window` independent samples."""
        f = 1.0 / np.sqrt(window)
        return replace(self, sigma_mag_v=self.sigma_mag_v * f,
                       sigma_phase_v=self.sigma_phase_v * f,
                       sigma_mag_i=self.sigma_mag_i * f,
                       sigma_phase_i=self.sigma_phase_i * f)

    @property
    def is_zero(self) -> bool:
        return (self.sigma_mag_v == 0 and self.sigma_phase_v == 0
                and self.sigma_mag_i == 0 and self.sigma_phase_i == 0)

    def to_dict(self) -> dict:
        return {"sigma_mag_v": self.sigma_mag_v, "sigma_phase_v": self.sigma_phase_v,
                "sigma_mag_i": self.sigma_mag_i, "sigma_phase_i": self.sigma_phase_i,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(**d)


@dataclass
class PhasorSeries:
    """Per-bus, per-time magnitude/phase records for voltage and current."""

    v_mag: np.ndarray  # (N, n)
    v_ang: np.ndarray
    i_mag: np.ndarray
    i_ang: np.ndarray
    timestamps: np.ndarray  # (N,), seconds
    is_noisy: bool = False

    def __post_init__(self):
        shape = np.shape(self.v_mag)
        for name in ("v_ang", "i_mag", "i_ang"):
            if np.shape(getattr(self, name)) != shape:
                raise StructureError("phasor arrays must share dimensions")
        if np.shape(self.timestamps) != (shape[0],):
            raise StructureError("timestamp length must match sample count")
        if np.any(self.v_mag <= 0):
            raise StructureError("voltage magnitudes must be positive")

    @property
    def n(self) -> int:
        return self.v_mag.shape[1]

    @property
    def n_samples(self) -> int:
        return self.v_mag.shape[0]

    @property
    def voltage(self) -> np.ndarray:
        """Complex (N, n) voltage matrix."""
        return self.v_mag * np.exp(1j * self.v_ang)

    @property
    def current(self) -> np.ndarray:
        return self.i_mag * np.exp(1j * self.i_ang)

    @classmethod
    def from_complex(cls, V: np.ndarray, I: np.ndarray,
                     timestamps=None, is_noisy=False) -> "PhasorSeries":
        V = np.asarray(V, dtype=complex)
        I = np.asarray(I, dtype=complex)
        if timestamps is None:
            timestamps = np.arange(V.shape[0], dtype=float)
        return cls(np.abs(V), np.angle(V), np.abs(I), np.angle(I),
                   np.asarray(timestamps, dtype=float), is_noisy)


@dataclass
class SampleMoments:
    """Cartesian mean and covariance of the noise on one phasor sample."""

    mean: np.ndarray  # (2,)
    cov: np.ndarray  # (2, 2)


# ---------------------------------------------------------------------------
# Moment formulas
# ---------------------------------------------------------------------------

def _exact_moment_arrays(v, theta, sig_mag, sig_ph):
    """Unconditional Cartesian noise moments from the true magnitude and phase."""
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    s = sig_ph ** 2
    ct, st = np.cos(theta), np.sin(theta)
    mean_c = v * ct * (np.exp(-s / 2) - 1.0)
    mean_d = v * st * (np.exp(-s / 2) - 1.0)
    es = np.exp(-s)
    ch, sh = np.cosh(s), np.sinh(s)
    var_c = v**2 * es * (ct**2 * (ch - 1) + st**2 * sh) \
        + sig_mag**2 * es * (ct**2 * ch + st**2 * sh)
    var_d = v**2 * es * (st**2 * (ch - 1) + ct**2 * sh) \
        + sig_mag**2 * es * (st**2 * ch + ct**2 * sh)
    cov_cd = st * ct * np.exp(-2 * s) * (sig_mag**2 + v**2 * (1 - np.exp(s)))
    return mean_c, mean_d, var_c, var_d, cov_cd


def _measured_moment_arrays(v_meas, theta_meas, sig_mag, sig_ph):
    """Cartesian noise moments conditioned on the measured magnitude and phase."""
    v = np.asarray(v_meas, dtype=float)
    theta = np.asarray(theta_meas, dtype=float)
    s = sig_ph ** 2
    ct, st = np.cos(theta), np.sin(theta)
    mean_c = v * ct * (np.exp(-s) - np.exp(-s / 2))
    mean_d = v * st * (np.exp(-s) - np.exp(-s / 2))
    e2 = np.exp(-2 * s)
    ch1, sh1 = np.cosh(s), np.sinh(s)
    ch2, sh2 = np.cosh(2 * s), np.sinh(2 * s)
    var_c = v**2 * e2 * (ct**2 * (ch2 - ch1) + st**2 * (sh2 - sh1)) \
        + sig_mag**2 * e2 * (ct**2 * (2 * ch2 - ch1) + st**2 * (2 * sh2 - sh1))
    var_d = v**2 * e2 * (st**2 * (ch2 - ch1) + ct**2 * (sh2 - sh1)) \
        + sig_mag**2 * e2 * (st**2 * (2 * ch2 - ch1) + ct**2 * (2 * sh2 - sh1))
    cov_cd = st * ct * np.exp(-4 * s) * (sig_mag**2 + (v**2 + sig_mag**2) * (1 - np.exp(s)))
    return mean_c, mean_d, var_c, var_d, cov_cd


def _pack(mc, md, vc, vd, cc) -> SampleMoments:
    return SampleMoments(mean=np.array([mc, md]),
                         cov=np.array([[vc, cc], [cc, vd]]))


def cartesian_moments_exact(v: float, theta: float,
                            sig_mag: float, sig_ph: float) -> SampleMoments:
    """Noise moments from the true (unobservable) magnitude and phase."""
    return _pack(*(float(x) for x in _exact_moment_arrays(v, theta, sig_mag, sig_ph)))


def cartesian_moments_measured(v_meas: float, theta_meas: float,
                               sig_mag: float, sig_ph: float) -> SampleMoments:
    """Noise moments conditioned on the measured magnitude and phase."""
    return _pack(*(float(x) for x in
                   _measured_moment_arrays(v_meas, theta_meas, sig_mag, sig_ph)))


def bias_significance(spec: NoiseSpec, v: float = 1.0, channel: str = "v") -> float:
    """Ratio of the first-order Cartesian bias to the smallest noise std.

    The bias norm is v*sigma_phase^2/2; the reference std is the square root
    of min(sigma_mag^2, v^2 sigma_phase^2). A small ratio means the bias can
    be neglected relative to the noise floor.
    """
    if channel == "v":
        sig_mag, sig_ph = spec.sigma_mag_v, spec.sigma_phase_v
    elif channel == "i":
        sig_mag, sig_ph = spec.sigma_mag_i, spec.sigma_phase_i
    else:
        raise ConfigError(f"unknown channel {channel!r}")
    if sig_mag <= 0 or sig_ph <= 0:
        raise NumericalError("bias significance undefined for zero noise stds")
    bias = v * sig_ph**2 / 2.0
    sigma_min = np.sqrt(min(sig_mag**2, v**2 * sig_ph**2))
    return float(bias / sigma_min)


# ---------------------------------------------------------------------------
# Corruption and bias removal
# ---------------------------------------------------------------------------

def corrupt(series: PhasorSeries, spec: NoiseSpec) -> PhasorSeries:
    """Add i.i.d. Gaussian polar noise to an exact series.

    Deterministic given the spec seed. Noise is generated as standard normal
    draws scaled by the stds, so two specs differing only in sigma produce
    perfectly coupled noise realizations. Draws that would produce a
    non-positive magnitude are resampled.
    """
    if series.is_noisy:
        raise StructureError("corrupt expects an exact series")
    rng = np.random.default_rng(spec.seed)
    shape = series.v_mag.shape

    def noisy_mag(mag, sigma):
        out = mag + sigma * rng.standard_normal(shape)
        resampled = 0
        while True:
            bad = out <= 0
            nbad = int(bad.sum())
            if nbad == 0:
                break
            resampled += nbad
            out[bad] = mag[bad] + sigma * rng.standard_normal(nbad)
        if resampled > 1e-4 * mag.size:
            warnings.warn(f"resampled {resampled} negative-magnitude draws "
                          f"({resampled / mag.size:.2%} of samples)", stacklevel=2)
        return out

    v_mag = noisy_mag(series.v_mag, spec.sigma_mag_v)
    v_ang = series.v_ang + spec.sigma_phase_v * rng.standard_normal(shape)
    i_mag = noisy_mag(series.i_mag, spec.sigma_mag_i)
    i_ang = series.i_ang + spec.sigma_phase_i * rng.standard_normal(shape)
    return PhasorSeries(v_mag, v_ang, i_mag, i_ang,
                        series.timestamps.copy(), is_noisy=True)


def debias(series: PhasorSeries, spec: NoiseSpec) -> PhasorSeries:
    """Subtract the measurement-conditioned Cartesian bias from a noisy series.

    After this step the Cartesian noise is treated as zero-mean.
    """
    def debias_channel(mag, ang, sig_mag, sig_ph):
        mc, md, *_ = _measured_moment_arrays(mag, ang, sig_mag, sig_ph)
        z = mag * np.exp(1j * ang) - (mc + 1j * md)
        return np.abs(z), np.angle(z)

    v_mag, v_ang = debias_channel(series.v_mag, series.v_ang,
                                  spec.sigma_mag_v, spec.sigma_phase_v)
    i_mag, i_ang = debias_channel(series.i_mag, series.i_ang,
                                  spec.sigma_mag_i, spec.sigma_phase_i)
    return PhasorSeries(v_mag, v_ang, i_mag, i_ang,
                        series.timestamps.copy(), is_noisy=series.is_noisy)


# ---------------------------------------------------------------------------
# Block covariance of the stacked real data vector
# ---------------------------------------------------------------------------

@dataclass
class BlockCovariance:
    """Three-diagonal covariance of a stacked real data vector.

    The implicit full matrix is 2nN-by-2nN: variances of the real parts on
    the main diagonal, variances of the imaginary parts in the lower-right
    block, and the real/imaginary covariances on the two off-diagonals. Per
    (sample, bus) the structure is an independent 2x2 block, which makes
    inversion analytic.

    Arrays are stored (N, n); the stacked vector uses bus-major order, so
    flat index h*N + t maps to array element [t, h].
    """

    var_re: np.ndarray
    var_im: np.ndarray
    cov_reim: np.ndarray

    @property
    def N(self) -> int:
        return self.var_re.shape[0]

    @property
    def n(self) -> int:
        return self.var_re.shape[1]

    @property
    def size(self) -> int:
        return 2 * self.N * self.n

    def block(self, t: int, h: int) -> np.ndarray:
        return np.array([[self.var_re[t, h], self.cov_reim[t, h]],
                         [self.cov_reim[t, h], self.var_im[t, h]]])

    def _flat(self, arr) -> np.ndarray:
        return arr.ravel(order="F")

    def diagonals(self):
        """The three nonzero diagonals as flat vectors (bus-major order)."""
        return self._flat(self.var_re), self._flat(self.var_im), self._flat(self.cov_reim)

    def inverse_diagonals(self):
        """Diagonals of the analytic blockwise inverse."""
        det = self.var_re * self.var_im - self.cov_reim**2
        return (self._flat(self.var_im / det), self._flat(self.var_re / det),
                self._flat(-self.cov_reim / det))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        a, b, c = self.diagonals()
        half = x.size // 2
        xr, xi = x[:half], x[half:]
        return np.concatenate([a * xr + c * xi, c * xr + b * xi])

    def solve(self, x: np.ndarray) -> np.ndarray:
        ai, bi, ci = self.inverse_diagonals()
        half = x.size // 2
        xr, xi = x[:half], x[half:]
        return np.concatenate([ai * xr + ci * xi, ci * xr + bi * xi])

    def quad_form(self, x: np.ndarray) -> float:
        """x^T Sigma^-1 x via the blockwise inverse."""
        ai, bi, ci = self.inverse_diagonals()
        half = x.size // 2
        xr, xi = x[:half], x[half:]
        return float(np.sum(ai * xr**2 + bi * xi**2 + 2 * ci * xr * xi))

    def dense(self) -> np.ndarray:
        """Full 2nN x 2nN matrix, for small test cases only."""
        a, b, c = self.diagonals()
        m = a.size
        out = np.zeros((2 * m, 2 * m))
        out[:m, :m] = np.diag(a)
        out[m:, m:] = np.diag(b)
        out[:m, m:] = np.diag(c)
        out[m:, :m] = np.diag(c)
        return out


def _clamp_psd(var_c, var_d, cov_cd):
    """Clamp any (numerically) indefinite 2x2 block to its PSD projection."""
    det = var_c * var_d - cov_cd**2
    bad = det < 0
    if np.any(bad):
        warnings.warn(f"clamped {int(bad.sum())} non-PSD covariance blocks",
                      stacklevel=3)
        # zero out the negative eigenvalue by shrinking the covariance
        lim = np.sqrt(np.maximum(var_c * var_d, 0.0))
        cov_cd = np.where(bad, np.sign(cov_cd) * lim, cov_cd)
    return var_c, var_d, cov_cd


def assemble_block_covariance(series: PhasorSeries, spec: NoiseSpec):
    """Per-sample noise covariances of a noisy series, as (Sigma_v, Sigma_i).

    Uses the measurement-conditioned moment formulas evaluated at the
    measured magnitudes and phases.
    """
    def channel(mag, ang, sig_mag, sig_ph):
        _, _, vc, vd, cc = _measured_moment_arrays(mag, ang, sig_mag, sig_ph)
        vc, vd, cc = np.broadcast_arrays(vc, vd, cc)
        vc, vd, cc = _clamp_psd(vc.copy(), vd.copy(), cc.copy())
        return BlockCovariance(vc, vd, cc)

    sigma_v = channel(series.v_mag, series.v_ang, spec.sigma_mag_v, spec.sigma_phase_v)
    sigma_i = channel(series.i_mag, series.i_ang, spec.sigma_mag_i, spec.sigma_phase_i)
    return sigma_v, sigma_i


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def moving_average_downsample(series: PhasorSeries, spec: NoiseSpec, window: int):
    """Average non-overlapping windows of `window` samples.

    Averaging happens on the complex phasors, not the polar components:
    complex averaging is linear, so it preserves i = Yv exactly for
    noise-free data, while averaging magnitudes and angles separately
    leaves a quadratic error whenever the signal moves within a window.
    Returns the downsampled series together with the noise spec of the
    filtered data (variances divided by the window length). Windows do not
    overlap, so filtered samples stay independent.
    """
    if window < 1:
        raise ConfigError("window must be >= 1")
    N = series.n_samples
    if window > N:
        raise ConfigError(f"window {window} exceeds sample count {N}")
    if window == 1:
        return series, spec
    m = N // window

    def avg(mag, ang):
        z = (mag * np.exp(1j * ang))[:m * window]
        z = z.reshape(m, window, -1).mean(axis=1)
        return np.abs(z), np.angle(z)

    vm, va = avg(series.v_mag, series.v_ang)
    im, ia = avg(series.i_mag, series.i_ang)
    out = PhasorSeries(vm, va, im, ia,
                       series.timestamps[:m * window].reshape(m, window).mean(axis=1),
                       is_noisy=series.is_noisy)
    return out, spec.filtered(window)


def center_voltages(V: np.ndarray, rated: float) -> np.ndarray:
    """Subtract the rated voltage phasor from every sample.

    Leaves I = YV unchanged for Laplacian Y. Noise covariances must still be
    computed from the uncentered measurements.
    """
    return np.asarray(V, dtype=complex) - rated


# ---------------------------------------------------------------------------
# Measurement files
# ---------------------------------------------------------------------------

def save_measurements(series: PhasorSeries, path, spec: NoiseSpec | None = None,
                      preprocessing: dict | None = None) -> None:
    """Write a measurement CSV plus a JSON sidecar with noise metadata.

    CSV columns: t, bus, v_mag, v_ang, i_mag, i_ang (angles in radians,
    magnitudes per-unit). The sidecar lands at `<path>.meta.json`.
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "bus", "v_mag", "v_ang", "i_mag", "i_ang"])
        for t in range(series.n_samples):
            for h in range(series.n):
                w.writerow([repr(float(series.timestamps[t])), h,
                            repr(float(series.v_mag[t, h])),
                            repr(float(series.v_ang[t, h])),
                            repr(float(series.i_mag[t, h])),
                            repr(float(series.i_ang[t, h]))])
    meta = {"is_noisy": series.is_noisy,
            "noise": spec.to_dict() if spec is not None else None,
            "preprocessing": preprocessing or {}}
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2)


def load_measurements(path):
    """Read a measurement CSV; returns (PhasorSeries, NoiseSpec|None, preprocessing)."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            rows.append((float(rec["t"]), int(rec["bus"]), float(rec["v_mag"]),
                         float(rec["v_ang"]), float(rec["i_mag"]), float(rec["i_ang"])))
    if not rows:
        raise ConfigError(f"{path}: empty measurement file")
    buses = sorted({r[1] for r in rows})
    times = sorted({r[0] for r in rows})
    n, N = len(buses), len(times)
    if len(rows) != n * N:
        raise ConfigError(f"{path}: expected {n * N} records, found {len(rows)}")
    bus_idx = {b: j for j, b in enumerate(buses)}
    t_idx = {t: j for j, t in enumerate(times)}
    arrs = [np.zeros((N, n)) for _ in range(4)]
    for t, b, vm, va, im, ia in rows:
        ti, bi = t_idx[t], bus_idx[b]
        arrs[0][ti, bi], arrs[1][ti, bi] = vm, va
        arrs[2][ti, bi], arrs[3][ti, bi] = im, ia
    meta_path = str(path) + ".meta.json"
    spec, prep, noisy = None, {}, True
    try:
        with open(meta_path) as f:
            meta = json.load(f)
        noisy = bool(meta.get("is_noisy", True))
        if meta.get("noise") is not None:
            spec = NoiseSpec.from_dict(meta["noise"])
        prep = meta.get("preprocessing", {})
    except FileNotFoundError:
        pass
    series = PhasorSeries(*arrs, np.asarray(times, dtype=float), is_noisy=noisy)
    return series, spec, prep
