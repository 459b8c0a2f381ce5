"""Synthetic feeders, stochastic loads, power flow, and scenario pipeline.

The simulator produces exact phasor series satisfying i = Yv at every time
step, then pushes them through the measurement chain: polar noise, bias
removal, moving-average filtering, and voltage centering. The slack bus is a
simulator-only concept used to close the power-flow equations; its
measurements are emitted like any other bus and the estimators receive no
knowledge of it.
"""

from __future__ import annotations

import configparser
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, NumericalError, StructureError
from .grid import (AdmittanceMatrix, GridTopology, LineSpec, build_admittance,
                   kron_reduce, load_grid, save_grid)
from .phasors import (BlockCovariance, NoiseSpec, PhasorSeries,
                      assemble_block_covariance, center_voltages, corrupt,
                      debias, moving_average_downsample)

VOLTAGE_BAND = (0.9, 1.1)


# ---------------------------------------------------------------------------
# Feeder generation
# ---------------------------------------------------------------------------

def generate_feeder(n: int, branching: int = 3, rx_ratio: float = 0.5,
                    admittance_scale: float = 15.0, seed: int = 0,
                    extra_edges: int = 0) -> GridTopology:
    """Random radial feeder with a constant R/X ratio on every line.

    Bus k >= 1 attaches to one of the `branching` most recent buses, which
    interpolates between a chain (branching=1) and a bushy tree. Line
    admittance magnitudes are uniform in [0.5, 1.5] * admittance_scale; each
    line satisfies Re(y) / (-Im(y)) = rx_ratio exactly.

    :param extra_edges: optional loop-closing edges for meshed test grids.
    """
    if n < 2:
        raise StructureError("need at least two buses")
    rng = np.random.default_rng(seed)
    unit = (rx_ratio - 1j) / abs(rx_ratio - 1j)
    lines = []
    for k in range(1, n):
        parent = int(rng.integers(max(0, k - branching), k))
        y = admittance_scale * rng.uniform(0.5, 1.5) * unit
        lines.append(LineSpec(parent, k, y.real, y.imag))
    present = {(min(l.from_bus, l.to_bus), max(l.from_bus, l.to_bus))
               for l in lines}
    added = 0
    attempts = 0
    while added < extra_edges and attempts < 100 * max(extra_edges, 1):
        attempts += 1
        h, k = rng.integers(0, n, size=2)
        if h == k or (min(h, k), max(h, k)) in present:
            continue
        y = admittance_scale * rng.uniform(0.5, 1.5) * unit
        lines.append(LineSpec(int(h), int(k), y.real, y.imag))
        present.add((min(h, k), max(h, k)))
        added += 1
    return GridTopology(n=n, lines=lines)


# ---------------------------------------------------------------------------
# Loads
# ---------------------------------------------------------------------------

@dataclass
class LoadParams:
    """Parameters of the stochastic per-bus load generator.

    Power draws are mean-reverting around a daily sinusoidal shape; the
    `volatility` is the stationary relative standard deviation and
    `reversion_time` the autocorrelation time in seconds (much longer than
    the measurement period, so consecutive samples stay highly correlated).
    """

    mean_power: float = 0.02   # per-unit consumption per loaded bus
    power_factor: float = 0.95
    volatility: float = 0.2
    reversion_time: float = 300.0
    daily_amplitude: float = 0.3
    resolution: float = 0.1    # seconds between generator steps
    # relative half-width of the per-bus mean spread: bus means are drawn
    # uniformly in mean_power * [1 - spread, 1 + spread]
    spread: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.spread < 1.0:
            raise ConfigError(f"load spread must lie in [0, 1), "
                              f"got {self.spread}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("mean_power", "power_factor", "volatility", "reversion_time",
                 "daily_amplitude", "resolution", "spread", "seed")}


@dataclass
class LoadProfile:
    """Complex power injections on the measurement time grid."""

    s: np.ndarray  # (N, n) complex, negative real part = consumption
    timestamps: np.ndarray
    params: LoadParams
    unloaded: tuple = ()

    def __post_init__(self):
        if np.abs(np.asarray(self.s)[:, list(self.unloaded)]).max(initial=0.0) != 0:
            raise StructureError("unloaded buses must carry zero injection")


def _ou_paths(m: int, n: int, std: float, a: float, rng) -> np.ndarray:
    """(m, n) stationary AR(1) paths with std `std` and lag-1 coefficient a."""
    drive = std * np.sqrt(max(1.0 - a**2, 0.0))
    x = np.zeros((m, n))
    x[0] = std * rng.standard_normal(n)
    for k in range(1, m):
        x[k] = a * x[k - 1] + drive * rng.standard_normal(n)
    return x


def generate_loads(n: int, n_samples: int, params: LoadParams,
                   rate: float = 100.0, unloaded=()) -> LoadProfile:
    """Mean-reverting load paths, linearly interpolated to the sample rate.

    The generator runs at `params.resolution` seconds and the result is
    interpolated onto the (faster) measurement grid.
    """
    timestamps = np.arange(n_samples) / rate
    duration = timestamps[-1] if n_samples > 1 else 0.0
    dt = params.resolution
    m = int(np.ceil(duration / dt)) + 2
    rng = np.random.default_rng(params.seed)
    # AR(1) with stationary std = volatility and autocorrelation time
    # reversion_time
    a = max(0.0, 1.0 - dt / params.reversion_time)
    x = _ou_paths(m, n, params.volatility, a, rng)
    coarse_t = np.arange(m) * dt
    shape = 1.0 + params.daily_amplitude * np.sin(2 * np.pi * coarse_t / 86400.0)
    p_coarse = params.mean_power * shape[:, None] * (1.0 + x)
    if params.spread > 0:
        # per-bus mean levels; drawn after the paths so spread = 0 keeps the
        # historical stream
        p_coarse = p_coarse * (1.0 + params.spread * rng.uniform(-1, 1, n))
    P = np.column_stack([np.interp(timestamps, coarse_t, p_coarse[:, h])
                         for h in range(n)])
    tan_phi = np.tan(np.arccos(params.power_factor))
    s = -(P + 1j * tan_phi * P)  # consumption = negative injection
    s[:, list(unloaded)] = 0.0
    return LoadProfile(s=s, timestamps=timestamps, params=params,
                       unloaded=tuple(unloaded))


# ---------------------------------------------------------------------------
# Power flow
# ---------------------------------------------------------------------------

def solve_power_flow(Y: AdmittanceMatrix, s: np.ndarray, slack: int = 0,
                     v_slack=1.0, tol: float = 1e-12, max_iter: int = 200):
    """Fixed-point power flow for constant-power injections.

    Iterates v_rest <- Y_rr^-1 (conj(s/v) - Y_r0 v_0) with the slack voltage
    held at `v_slack` (angle 0, the phase reference; a scalar or one value
    per time step). Accepts a single injection vector or a (N, n) batch;
    returns (v, i) of matching shape with i = Yv holding to machine
    precision and the per-bus power mismatch below `tol`.

    :raises NumericalError: if any time step fails to converge (voltage
        collapse regime), reporting the worst mismatch.
    """
    M = Y.matrix
    n = Y.n
    s = np.asarray(s, dtype=complex)
    single = s.ndim == 1
    S = s[None, :] if single else s
    if S.shape[1] != n:
        raise StructureError("injection vector length must match bus count")
    N = S.shape[0]
    v0 = np.broadcast_to(np.asarray(v_slack, dtype=float), (N,))
    rest = np.array([h for h in range(n) if h != slack])
    Yrr = M[np.ix_(rest, rest)]
    Yr0 = M[rest, slack]
    lu = sla.lu_factor(Yrr)
    Sr = S[:, rest]
    Vr = v0[:, None] * np.ones(len(rest))
    Vr = Vr.astype(complex)
    mism = np.inf
    for _ in range(max_iter):
        rhs = np.conj(Sr / Vr) - v0[:, None] * Yr0
        Vr = sla.lu_solve(lu, rhs.T).T  # Yrr is symmetric
        # power mismatch at the candidate point
        inj = Vr * np.conj(Vr @ Yrr.T + v0[:, None] * Yr0)
        mism_t = np.abs(inj - Sr).max(axis=1)
        mism = mism_t.max()
        if mism < tol:
            break
    else:
        worst = int(mism_t.argmax())
        raise NumericalError(f"power flow did not converge in {max_iter} "
                             f"iterations; worst mismatch {mism:.3e} at "
                             f"time step {worst}")
    V = np.empty((N, n), dtype=complex)
    V[:, rest] = Vr
    V[:, slack] = v0
    I = V @ M.T
    if single:
        return V[0], I[0]
    return V, I


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """Everything needed for one reproducible simulated measurement campaign."""

    topology: GridTopology
    load: LoadParams = field(default_factory=LoadParams)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec.uniform(1e-4))
    n_samples: int = 1000      # post-filter sample count
    rate: float = 100.0        # raw measurement rate, Hz
    window: int = 1            # moving-average length K
    do_debias: bool = True
    do_center: bool = True
    slack: int = 0
    slack_voltage: float | None = None  # defaults to the rated voltage
    slack_variation: float = 0.005  # relative std of upstream fluctuation
    unloaded: tuple = ()       # zero-injection buses besides the slack
    generator: dict | None = None  # feeder-generator params, for serialization
    name: str = ""

    def __post_init__(self):
        if not 0 <= self.slack < self.topology.n:
            raise ConfigError("slack index out of range")
        if self.slack in self.unloaded:
            raise ConfigError("the slack bus is implicitly unloaded")
        if self.n_samples < 2 or self.window < 1:
            raise ConfigError("need n_samples >= 2 and window >= 1")

    @property
    def v0(self) -> float:
        return (self.topology.rated_voltage if self.slack_voltage is None
                else self.slack_voltage)


@dataclass
class ScenarioResult:
    """Output of run_scenario: raw series plus estimator-ready arrays."""

    scenario: Scenario
    truth: AdmittanceMatrix        # ground truth on the kept buses
    keep: np.ndarray               # original indices of the kept buses
    exact: PhasorSeries            # exact states, downsampled like the data
    noisy: PhasorSeries            # corrupted + filtered measurements
    noise: NoiseSpec               # noise spec of the filtered data
    V: np.ndarray                  # prepared complex voltages (debiased, centered)
    I: np.ndarray                  # prepared complex currents
    sigma_v: BlockCovariance
    sigma_i: BlockCovariance


def run_scenario(scenario: Scenario) -> ScenarioResult:
    """Simulate a scenario end to end.

    Power flow runs on the full feeder; ground truth is Kron-reduced over the
    unloaded (zero-injection) buses, whose elimination leaves the
    current-voltage relation of the kept buses exact. The kept set always
    includes the slack bus, since its injection balances the loads.
    """
    topo = scenario.topology
    Y_full = build_admittance(topo)
    n = topo.n
    unloaded = set(scenario.unloaded)
    n_raw = scenario.n_samples * scenario.window
    loads = generate_loads(n, n_raw, scenario.load, rate=scenario.rate,
                           unloaded=tuple(unloaded | {scenario.slack}))
    # upstream voltage fluctuation: the slack magnitude follows its own
    # mean-reverting path (angle stays 0, it is the reference), otherwise the
    # slack column of V would be constant and unidentifiable
    v0 = scenario.v0
    if scenario.slack_variation > 0:
        lp = scenario.load
        dt = lp.resolution
        m = int(np.ceil(loads.timestamps[-1] / dt)) + 2
        rng = np.random.default_rng(lp.seed + 7919)
        a = max(0.0, 1.0 - dt / lp.reversion_time)
        path = _ou_paths(m, 1, scenario.slack_variation, a, rng)[:, 0]
        v0 = v0 * (1.0 + np.interp(loads.timestamps,
                                   np.arange(m) * dt, path))
    try:
        V, I = solve_power_flow(Y_full, loads.s, slack=scenario.slack,
                                v_slack=v0)
    except NumericalError as exc:
        raise NumericalError(f"scenario {scenario.name!r}: {exc}") from exc
    vmag = np.abs(V)
    if vmag.min() < VOLTAGE_BAND[0] or vmag.max() > VOLTAGE_BAND[1]:
        raise NumericalError(
            f"scenario {scenario.name!r}: voltage magnitude "
            f"[{vmag.min():.4f}, {vmag.max():.4f}] left the sanity band "
            f"{VOLTAGE_BAND}; rescale loads or admittances")

    keep = np.array([h for h in range(n) if h not in unloaded])
    if unloaded:
        truth = kron_reduce(Y_full, keep)
    else:
        truth = Y_full
    exact = PhasorSeries.from_complex(V[:, keep], I[:, keep], loads.timestamps)

    spec = scenario.noise
    noisy = exact if spec.is_zero else corrupt(exact, spec)
    if scenario.window > 1:
        exact, _ = moving_average_downsample(exact, spec, scenario.window)
        noisy, spec = moving_average_downsample(noisy, spec, scenario.window)

    sigma_v, sigma_i = assemble_block_covariance(noisy, spec)
    clean = debias(noisy, spec) if (scenario.do_debias and not spec.is_zero) \
        else noisy
    Vp = clean.voltage
    if scenario.do_center:
        Vp = center_voltages(Vp, scenario.v0)
    return ScenarioResult(scenario=scenario, truth=truth, keep=keep,
                          exact=exact, noisy=noisy, noise=spec,
                          V=Vp, I=clean.current,
                          sigma_v=sigma_v, sigma_i=sigma_i)


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

def save_scenario(scenario: Scenario, path) -> None:
    """Write a scenario INI file with [grid], [loads], [noise], [preprocess].

    The grid is stored either as generator parameters (when the topology came
    from generate_feeder) or as a reference to a grid fixture written next to
    the scenario file.
    """
    cp = configparser.ConfigParser()
    cp["grid"] = {}
    if scenario.generator is not None:
        for k, v in scenario.generator.items():
            cp["grid"][k] = repr(v)
    else:
        grid_path = str(path) + ".grid"
        save_grid(scenario.topology, grid_path)
        cp["grid"]["file"] = os.path.basename(grid_path)
    cp["grid"]["slack"] = str(scenario.slack)
    cp["grid"]["slack_variation"] = repr(scenario.slack_variation)
    if scenario.slack_voltage is not None:
        cp["grid"]["slack_voltage"] = repr(scenario.slack_voltage)
    if scenario.unloaded:
        cp["grid"]["unloaded"] = ",".join(str(h) for h in scenario.unloaded)
    cp["loads"] = {k: repr(v) for k, v in scenario.load.to_dict().items()}
    cp["noise"] = {k: repr(v) for k, v in scenario.noise.to_dict().items()}
    cp["preprocess"] = {"n_samples": str(scenario.n_samples),
                        "rate": repr(scenario.rate),
                        "window": str(scenario.window),
                        "debias": str(scenario.do_debias),
                        "center": str(scenario.do_center)}
    with open(path, "w") as f:
        if scenario.name:
            f.write(f"# scenario: {scenario.name}\n")
        cp.write(f)


_GENERATOR_KEYS = {"n": int, "branching": int, "rx_ratio": float,
                   "admittance_scale": float, "seed": int, "extra_edges": int}


def load_scenario(path) -> Scenario:
    """Parse a scenario INI file written by save_scenario (or by hand)."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read scenario file {path}")
    if "grid" not in cp:
        raise ConfigError(f"{path}: missing [grid] section")
    g = cp["grid"]
    generator = None
    try:
        if "file" in g:
            grid_path = g["file"]
            if not os.path.isabs(grid_path):
                grid_path = os.path.join(os.path.dirname(str(path)), grid_path)
            topo = load_grid(grid_path)
        else:
            generator = {k: conv(g[k]) for k, conv in _GENERATOR_KEYS.items()
                         if k in g}
            if "n" not in generator:
                raise ConfigError(f"{path}: [grid] needs either a file "
                                  "reference or generator parameters (n, ...)")
            topo = generate_feeder(**generator)

        load = LoadParams()
        if "loads" in cp:
            d = load.to_dict()
            for k in d:
                if k in cp["loads"]:
                    cast = int if k == "seed" else float
                    d[k] = cast(cp["loads"][k])
            load = LoadParams(**d)

        if "noise" in cp:
            nz = cp["noise"]
            if "sigma" in nz:
                noise = NoiseSpec.uniform(float(nz["sigma"]),
                                          seed=nz.getint("seed", 0))
            else:
                noise = NoiseSpec(
                    sigma_mag_v=float(nz.get("sigma_mag_v", 0.0)),
                    sigma_phase_v=float(nz.get("sigma_phase_v", 0.0)),
                    sigma_mag_i=float(nz.get("sigma_mag_i", 0.0)),
                    sigma_phase_i=float(nz.get("sigma_phase_i", 0.0)),
                    seed=nz.getint("seed", 0))
        else:
            noise = NoiseSpec.uniform(1e-4)
            warnings.warn(f"{path}: no [noise] section; using uniform 1e-4",
                          stacklevel=2)

        pp = cp["preprocess"] if "preprocess" in cp else {}
        unloaded = tuple(int(x) for x in g.get("unloaded", "").split(",") if x)
        return Scenario(
            topology=topo, load=load, noise=noise,
            n_samples=int(pp.get("n_samples", 1000)),
            rate=float(pp.get("rate", 100.0)),
            window=int(pp.get("window", 1)),
            do_debias=str(pp.get("debias", "True")) == "True",
            do_center=str(pp.get("center", "True")) == "True",
            slack=int(g.get("slack", 0)),
            slack_voltage=(float(g["slack_voltage"])
                           if "slack_voltage" in g else None),
            slack_variation=float(g.get("slack_variation", 0.005)),
            unloaded=unloaded, generator=generator,
            name=os.path.splitext(os.path.basename(str(path)))[0])
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: malformed scenario file: {exc}") from exc
