"""Batch front door: parse run configs, execute scenarios, emit results.

Config format is JSON (a nested key-value tree; see README for the schema).
Exit codes: 0 pass, 1 verification failure, 2 configuration error,
3 numerical refusal.

Reproducibility contract: identical config (including seed) produces
byte-identical numeric outputs; every artifact carries the config hash, seed,
and engine in its header or metadata.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bath_oracle
from .engines import (
    ChoiSeries,
    DensitySeries,
    LindbladSpec,
    MarkovLimitScenario,
    choi_to_json,
    commuting_density,
    density_to_csv,
    density_to_json,
    integrate_lindblad,
    markov_limit_sweep,
    run_choi,
    run_density,
    trace_distance,
    verify_cp_tp,
)
from .errors import ConfigError, RefusalError, ValidationError
from .hilbert import TimeGrid, heisenberg_evolve, operator_preset
from .kernels import (
    PronySum,
    PronyTerm,
    SChoice,
    TimeLocal,
    discretize,
    load_kernel_csv,
    load_spectrum_csv,
    ou_kernel,
    prony_fit,
)
from .noise import NoiseSampler, moment_test
from .trajectories import TrajectoryConfig

MC_ENGINES = ("commuting", "hierarchy", "unitary", "markov_sse")


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _need(node: dict, key: str, path: str):
    if key not in node:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    return node[key]


def _parse_complex_matrix(node, path: str) -> np.ndarray:
    try:
        arr = np.asarray(node, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "expected a nested array of [re, im] pairs")
    if arr.ndim != 3 or arr.shape[-1] != 2:
        raise ConfigError(path, f"expected shape (d, d, 2), got {arr.shape}")
    return arr[..., 0] + 1j * arr[..., 1]


def _parse_operator(node, path: str, dim_hint: int | None = None) -> np.ndarray:
    if isinstance(node, str):
        try:
            return operator_preset(node, dim=dim_hint)
        except ValidationError as exc:
            raise ConfigError(path, str(exc))
    return _parse_complex_matrix(node, path)


def _parse_state(node, path: str) -> np.ndarray:
    if isinstance(node, dict) and "density" in node:
        return _parse_complex_matrix(node["density"], f"{path}.density")
    try:
        arr = np.asarray(node, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "expected a vector of [re, im] pairs or {'density': ...}")
    if arr.ndim != 2 or arr.shape[-1] != 2:
        raise ConfigError(path, f"expected shape (d, 2), got {arr.shape}")
    return arr[:, 0] + 1j * arr[:, 1]


def _parse_kernel(node: dict, path: str, channels: int):
    kind = _need(node, "type", path)
    if kind == "ou":
        return ou_kernel(float(node.get("weight", 1.0)), float(node.get("rate", 1.0)),
                         channels=channels)
    if kind == "prony":
        terms = []
        for i, t in enumerate(_need(node, "terms", path)):
            tp = f"{path}.terms[{i}]"
            w = _need(t, "weight", tp)
            r = _need(t, "rate", tp)
            terms.append(PronyTerm(int(t.get("j", 0)), int(t.get("k", 0)),
                                   complex(w[0], w[1]), complex(r[0], r[1])))
        return PronySum(channels, tuple(terms))
    if kind == "time_local":
        return TimeLocal(_parse_complex_matrix(_need(node, "matrix", path), f"{path}.matrix"))
    if kind == "kernel_csv":
        return load_kernel_csv(_need(node, "path", path), channels)
    if kind == "spectrum_csv":
        return load_spectrum_csv(_need(node, "path", path), channels)
    raise ConfigError(f"{path}.type", f"unknown kernel type {kind!r}")


@dataclass
class RunConfig:
    name: str
    hamiltonian: np.ndarray
    channels: list
    grid: TimeGrid
    kernel_spec: object
    s_choice: SChoice
    engine: str
    n_trajectories: int
    seed: int | None
    initial_state: np.ndarray
    hierarchy_depth: int = 4
    hierarchy_index_cap: int = 20000
    prony_terms: int = 4
    chunk_size: int = 1024
    dim_cap: int = 64
    output: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    bath: dict | None = None
    sweep: dict | None = None
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    system = _need(doc, "system", "")
    channels_doc = _need(system, "channels", "system")
    if not isinstance(channels_doc, list) or not channels_doc:
        raise ConfigError("system.channels", "expected a non-empty list")

    h_doc = _need(system, "hamiltonian", "system")
    dim_hint = None
    if not isinstance(h_doc, str):
        dim_hint = len(h_doc)
    hamiltonian = _parse_operator(h_doc, "system.hamiltonian", dim_hint)
    dim = hamiltonian.shape[0]
    channels = [_parse_operator(c, f"system.channels[{i}]", dim)
                for i, c in enumerate(channels_doc)]

    grid_doc = _need(doc, "grid", "")
    try:
        grid = TimeGrid(float(_need(grid_doc, "dt", "grid")),
                        int(_need(grid_doc, "n_steps", "grid")))
    except ValidationError as exc:
        raise ConfigError("grid", str(exc))

    engine = _need(doc, "engine", "")
    if engine not in MC_ENGINES + ("lindblad",):
        raise ConfigError("engine", f"unknown engine {engine!r}")

    seed = doc.get("seed")
    if engine in MC_ENGINES and seed is None:
        raise ConfigError("seed", "a master seed is mandatory for Monte-Carlo runs")

    kernel_spec = _parse_kernel(_need(doc, "kernel", ""), "kernel", len(channels))

    s_doc = doc.get("s_choice", "qsd")
    if isinstance(s_doc, dict):
        custom = _parse_kernel(_need(s_doc, "custom", "s_choice"), "s_choice.custom",
                               len(channels))
        s_choice = SChoice("custom", custom)
    else:
        try:
            s_choice = SChoice(str(s_doc))
        except ValidationError as exc:
            raise ConfigError("s_choice", str(exc))

    state = _parse_state(_need(doc, "initial_state", ""), "initial_state")
    hier = doc.get("hierarchy", {})
    return RunConfig(
        name=str(doc.get("name", "run")),
        hamiltonian=hamiltonian,
        channels=channels,
        grid=grid,
        kernel_spec=kernel_spec,
        s_choice=s_choice,
        engine=engine,
        n_trajectories=int(doc.get("trajectories", 1000)),
        seed=None if seed is None else int(seed),
        initial_state=state,
        hierarchy_depth=int(hier.get("depth", 4)),
        hierarchy_index_cap=int(hier.get("index_cap", 20000)),
        prony_terms=int(hier.get("prony_terms", 4)),
        chunk_size=int(doc.get("chunk_size", 1024)),
        dim_cap=int(system.get("dim_cap", 64)),
        output=doc.get("output", {}),
        verify=doc.get("verify", {}),
        bath=doc.get("bath_oracle"),
        sweep=doc.get("sweep"),
        raw=doc,
    )


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}")
    return parse_config(doc)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def preset_config(name: str) -> dict:
    if name == "dephasing-ou":
        return {
            "name": "dephasing-ou",
            "system": {"hamiltonian": [[[0, 0], [0, 0]], [[0, 0], [0, 0]]],
                       "channels": ["sigma_z"]},
            "grid": {"dt": 0.01, "n_steps": 200},
            "kernel": {"type": "ou", "weight": 1.0, "rate": 1.0},
            "s_choice": "qsd",
            "engine": "commuting",
            "trajectories": 10000,
            "seed": 20260810,
            "initial_state": [[0.7071067811865476, 0], [0.7071067811865476, 0]],
            "output": {"density_csv": True, "density_json": True},
            "verify": {"deterministic_reference": {"tol_sigma": 5.0},
                       "trace_preservation": {"tol_sigma": 5.0}},
        }
    if name == "qsd-vs-collapse":
        base = preset_config("dephasing-ou")
        base["name"] = "qsd-vs-collapse"
        base["trajectories"] = 10000
        base["verify"] = {"s_independence": {"against": ["collapse"], "tol_sigma": 5.0}}
        return base
    if name == "markov-sweep":
        return {
            "name": "markov-sweep",
            "system": {"hamiltonian": [[[0, 0], [0, 0]], [[0, 0], [0, 0]]],
                       "channels": ["sigma_z"]},
            "grid": {"dt": 0.005, "n_steps": 200},
            "kernel": {"type": "ou", "weight": 1.0, "rate": 1.0},
            "s_choice": "qsd",
            "engine": "commuting",
            "trajectories": 100,
            "seed": 7,
            "initial_state": [[0.7071067811865476, 0], [0.7071067811865476, 0]],
            "sweep": {"axis": "lambda", "values": [2.0, 8.0, 32.0], "gamma": 1.0,
                      "ratio_band": [2.5, 6.0]},
        }
    raise ConfigError("preset", f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

@dataclass
class Gate:
    name: str
    passed: bool
    details: dict

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "details": self.details}


@dataclass
class RunResult:
    exit_code: int
    gates: list
    artifacts: list
    report: dict


def _series_for(config: RunConfig) -> tuple[DensitySeries, object, object]:
    """Run the configured engine; returns (series, family, kernels-or-None)."""
    family = heisenberg_evolve(config.hamiltonian, config.channels, config.grid,
                               dim_cap=config.dim_cap)
    if config.engine == "lindblad":
        if not isinstance(config.kernel_spec, TimeLocal):
            raise ConfigError("kernel.type", "the lindblad engine needs a time_local kernel")
        spec = LindbladSpec(config.hamiltonian, tuple(config.channels), config.kernel_spec)
        rho0 = _as_density(config.initial_state)
        return integrate_lindblad(spec, rho0, config.grid), family, None

    tc = TrajectoryConfig(
        grid=config.grid, engine=config.engine, s_choice=config.s_choice,
        n_trajectories=config.n_trajectories, master_seed=config.seed,
        hierarchy_depth=config.hierarchy_depth, index_cap=config.hierarchy_index_cap,
        chunk_size=config.chunk_size,
    )
    if config.engine == "markov_sse":
        if not isinstance(config.kernel_spec, TimeLocal):
            raise ConfigError("kernel.type", "the markov_sse engine needs a time_local kernel")
        series = run_density(family, None, tc, config.initial_state,
                             dmat=config.kernel_spec,
                             smat=_time_local_s(config.kernel_spec, config.s_choice))
        return series, family, None

    kernels = discretize(config.kernel_spec, config.s_choice, config.grid)
    memory = None
    if config.engine == "hierarchy":
        memory = _memory_prony(config, kernels)
    dump_noise = config.output.get("dump_noise")
    dump_paths = config.output.get("dump_paths")
    series = run_density(family, kernels, tc, config.initial_state, memory=memory,
                         dump_noise_path=dump_noise or None,
                         dump_paths_path=dump_paths or None)
    return series, family, kernels


def _time_local_s(dmat: TimeLocal, s_choice: SChoice) -> TimeLocal | None:
    if s_choice.tag == "qsd":
        return None
    if s_choice.tag == "unitary":
        return dmat
    if s_choice.tag == "collapse":
        if callable(dmat.matrix):
            inner = dmat.matrix
            return TimeLocal(lambda t: -np.asarray(inner(t)), channels=dmat.channels)
        return TimeLocal(-dmat.matrix)
    if isinstance(s_choice.custom, TimeLocal):
        return s_choice.custom
    raise ConfigError("s_choice", "custom S for markov_sse must be time_local")


def _memory_prony(config: RunConfig, kernels) -> PronySum:
    """Memory kernel K = D - S in exponential-sum form for the hierarchy engine."""
    spec = config.kernel_spec
    if isinstance(spec, PronySum):
        d_terms = spec.terms
        if config.s_choice.tag == "qsd":
            return spec
        if config.s_choice.tag == "unitary":
            return PronySum(spec.channels, ())
        if config.s_choice.tag == "collapse":
            return PronySum(spec.channels, tuple(
                PronyTerm(t.j, t.k, 2 * t.weight, t.rate) for t in d_terms))
        if isinstance(config.s_choice.custom, PronySum):
            neg = tuple(PronyTerm(t.j, t.k, -t.weight, t.rate)
                        for t in config.s_choice.custom.terms)
            return PronySum(spec.channels, d_terms + neg)
        raise ConfigError("s_choice", "custom S for the hierarchy engine must be prony")
    # tabulated / spectral kernels: fit K = D - S on the lag grid
    from .kernels import TabulatedKernel
    n = config.grid.n_points
    kvals = kernels.memory_values().reshape(kernels.channels, n, kernels.channels, n)
    lag0 = np.transpose(kvals[:, :, :, 0], (1, 0, 2))  # K(t_n, 0) -> (N, J, J)
    tab = TabulatedKernel(config.grid.times, _lags_to_full(lag0, n))
    return prony_fit(tab, config.prony_terms).prony


def _lags_to_full(lags: np.ndarray, n: int) -> np.ndarray:
    from .kernels import _toeplitz_from_lags
    return _toeplitz_from_lags(lags, n)


def _as_density(state: np.ndarray) -> np.ndarray:
    if state.ndim == 1:
        return np.outer(state, state.conj())
    return state


def _verify_gates(config: RunConfig, series: DensitySeries, family, kernels) -> list:
    gates: list[Gate] = []
    for name, opts in sorted(config.verify.items()):
        opts = opts or {}
        if name == "trace_preservation":
            tol = float(opts.get("tol_sigma", 5.0))
            dev = np.abs(series.trace_mean - 1.0)
            band = tol * series.trace_stderr + 1e-10
            passed = bool(np.all(dev <= band))
            gates.append(Gate("trace_preservation", passed,
                              {"max_deviation": float(dev.max()),
                               "tol_sigma": tol}))
        elif name == "deterministic_reference":
            tol = float(opts.get("tol_sigma", 5.0))
            det = commuting_density(family, kernels, config.initial_state)
            dev = np.abs(series.rho - det.rho)
            band = tol * series.stderr + 1e-10
            passed = bool(np.all(dev <= band))
            gates.append(Gate("deterministic_reference", passed,
                              {"max_sigma": float(np.max(dev / np.maximum(series.stderr, 1e-300))),
                               "tol_sigma": tol}))
        elif name == "s_independence":
            tol = float(opts.get("tol_sigma", 5.0))
            others = opts.get("against", ["unitary", "collapse"])
            details = {}
            passed = True
            for i, other_tag in enumerate(others):
                alt = _series_for(_with_s_choice(config, other_tag, config.seed + 1 + i))[0]
                dist = np.array([trace_distance(series.rho[n], alt.rho[n])
                                 for n in range(config.grid.n_points)])
                band = _combined_band(series, alt, tol)
                details[other_tag] = {"max_distance": float(dist.max()),
                                      "max_band": float(band.max()),
                                      "passed": bool(np.all(dist <= band))}
                passed = passed and details[other_tag]["passed"]
            gates.append(Gate("s_independence", passed, details))
        elif name == "cp_tp":
            tol = float(opts.get("tol_sigma", 5.0))
            choi = _choi_for(config, family, kernels)
            rep = verify_cp_tp(choi, tol)
            gates.append(Gate("cp_tp", rep.passed,
                              {"max_tp_z": float(rep.tp_max_z.max()),
                               "min_choi_eigenvalue": float(rep.cp_min_eigenvalue.min())}))
        elif name == "moments":
            n_samples = int(opts.get("samples", 2000))
            tol = float(opts.get("tol_z", 5.0))
            sampler = NoiseSampler(kernels, config.seed)
            rep = moment_test(sampler.sample_batch(0, n_samples), kernels, tol)
            gates.append(Gate("moments", rep.passed,
                              {"max_z_hermitian": rep.max_z_hermitian,
                               "max_z_symmetric": rep.max_z_symmetric}))
        elif name == "bath_oracle":
            gates.append(_bath_gate(config, series, opts))
        else:
            raise ConfigError(f"verify.{name}", "unknown verification gate")
    return gates


def _with_s_choice(config: RunConfig, tag: str, seed: int) -> RunConfig:
    import copy
    other = copy.copy(config)
    other.s_choice = SChoice(tag)
    other.seed = seed
    other.verify = {}
    other.output = {}
    return other


def _combined_band(a: DensitySeries, b: DensitySeries, tol: float) -> np.ndarray:
    d = a.dim
    var = (a.stderr ** 2 + b.stderr ** 2).sum(axis=(1, 2))
    return tol * 0.5 * np.sqrt(d * var) + 1e-10


def _choi_for(config: RunConfig, family, kernels) -> ChoiSeries:
    tc = TrajectoryConfig(
        grid=config.grid, engine=config.engine, s_choice=config.s_choice,
        n_trajectories=config.n_trajectories, master_seed=config.seed,
        hierarchy_depth=config.hierarchy_depth, index_cap=config.hierarchy_index_cap,
        chunk_size=config.chunk_size,
    )
    memory = _memory_prony(config, kernels) if config.engine == "hierarchy" else None
    if config.engine == "markov_sse":
        return run_choi(family, None, tc, dmat=config.kernel_spec, smat=None)
    return run_choi(family, kernels, tc, memory=memory)


def _bath_gate(config: RunConfig, series: DensitySeries, opts: dict) -> Gate:
    if config.bath is None:
        raise ConfigError("bath_oracle", "bath settings required for the bath gate")
    spec = bath_oracle.BathSpec.from_dict(config.bath)
    oracle = bath_oracle.evolve_joint(config.hamiltonian, config.channels, spec,
                                      config.initial_state, config.grid)
    tol = float(opts.get("trace_distance_tol", 0.02))
    dist = trace_distance(series.rho[-1], oracle.rho[-1])
    return Gate("bath_oracle", dist <= tol,
                {"trace_distance_final": dist, "tolerance": tol})


def run(config: RunConfig, out_dir=None) -> RunResult:
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": config.config_hash, "seed": config.seed,
            "engine": config.engine, "version": "0.1.0"}
    try:
        series, family, kernels = _series_for(config)
        gates = _verify_gates(config, series, family, kernels)
        artifacts = []
        if out is not None:
            if config.output.get("density_csv", True):
                p = out / f"{config.name}.density.csv"
                density_to_csv(series, p, meta)
                artifacts.append(str(p))
            if config.output.get("density_json", True):
                p = out / f"{config.name}.density.json"
                density_to_json(series, p, meta)
                artifacts.append(str(p))
            if config.output.get("choi"):
                choi = _choi_for(config, family, kernels)
                p = out / f"{config.name}.choi.json"
                choi_to_json(choi, p, meta)
                artifacts.append(str(p))
    except ConfigError:
        raise
    except RefusalError as exc:
        report = {"name": config.name, "meta": meta, "refusal": str(exc)}
        if out is not None:
            _write_report(out / f"{config.name}.report.json", report)
        return RunResult(3, [], [], report)

    report = {
        "name": config.name,
        "meta": meta,
        "gates": [g.to_dict() for g in gates],
        "all_passed": all(g.passed for g in gates),
        "artifacts": artifacts,
    }
    if out is not None:
        _write_report(out / f"{config.name}.report.json", report)
        artifacts.append(str(out / f"{config.name}.report.json"))
    exit_code = 0 if all(g.passed for g in gates) else 1
    return RunResult(exit_code, gates, artifacts, report)


def sweep(config: RunConfig, out_dir=None) -> RunResult:
    if not config.sweep:
        raise ConfigError("sweep", "missing sweep definition")
    axis = _need(config.sweep, "axis", "sweep")
    values = config.sweep.get("values") or []
    if not values:
        raise ConfigError("sweep.values", "sweep axis has no values")
    meta = {"config_hash": config.config_hash, "seed": config.seed,
            "engine": config.engine, "version": "0.1.0"}

    try:
        if axis == "lambda":
            scenario = MarkovLimitScenario(
                hamiltonian=config.hamiltonian,
                channels=tuple(config.channels),
                gamma=float(config.sweep.get("gamma", 1.0)),
                rho0=_as_density(config.initial_state),
                t_final=config.grid.t_max,
                dt=config.grid.dt,
            )
            band = tuple(config.sweep.get("ratio_band", (2.5, 6.0)))
            rep = markov_limit_sweep(scenario, values, band)
            body = rep.to_dict()
            passed = rep.accepted
        elif axis == "depth":
            body, passed = _depth_sweep(config, [int(v) for v in values])
        else:
            raise ConfigError("sweep.axis", f"unknown sweep axis {axis!r}")
    except RefusalError as exc:
        report = {"name": config.name, "meta": meta, "refusal": str(exc)}
        return RunResult(3, [], [], report)

    report = {"name": config.name, "meta": meta, "sweep_axis": axis,
              "result": body, "all_passed": passed}
    artifacts = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p = out / f"{config.name}.sweep.report.json"
        _write_report(p, report)
        artifacts.append(str(p))
    return RunResult(0 if passed else 1, [], artifacts, report)


def _depth_sweep(config: RunConfig, depths: list) -> tuple[dict, bool]:
    rhos = []
    for depth in sorted(depths):
        import copy
        c = copy.copy(config)
        c.hierarchy_depth = depth
        c.engine = "hierarchy"
        c.verify = {}
        series = _series_for(c)[0]
        rhos.append((depth, series.rho))
    changes = [float(np.max(np.abs(rhos[i + 1][1] - rhos[i][1])))
               for i in range(len(rhos) - 1)]
    monotone = all(changes[i + 1] <= changes[i] for i in range(len(changes) - 1))
    return ({"depths": [d for d, _ in rhos], "successive_changes": changes,
             "monotone_decreasing": monotone}, monotone)


def report_command(results_dir) -> tuple[dict, int]:
    root = Path(results_dir)
    files = sorted(root.glob("*.report.json"))
    if not files:
        return {"error": f"no report artifacts under {root}"}, 2
    runs = []
    for f in files:
        with open(f) as fh:
            runs.append(json.load(fh))
    all_passed = all(r.get("all_passed", False) and "refusal" not in r for r in runs)
    summary = {"n_runs": len(runs), "all_passed": all_passed, "runs": runs}
    _write_report(root / "summary.json", summary)
    lines = [f"{len(runs)} runs, all_passed={all_passed}"]
    for r in runs:
        status = "REFUSED" if "refusal" in r else ("PASS" if r.get("all_passed") else "FAIL")
        lines.append(f"  [{status}] {r['name']} (hash {r['meta']['config_hash']}, "
                     f"seed {r['meta']['seed']}, engine {r['meta']['engine']})")
    (root / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary, 0 if all_passed else 1


def _write_report(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nonmarkov",
        description="Gaussian non-Markovian open-dynamics runs and verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in ("run", "sweep"):
        p = sub.add_parser(cmd)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--preset", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--trajectories", type=int, default=None)
        p.add_argument("--engine", type=str, default=None)
        p.add_argument("--out", type=str, default="results")
        p.add_argument("--verify-only", action="store_true")
    p = sub.add_parser("report")
    p.add_argument("results_dir", type=str)
    return parser


def _config_from_args(args) -> RunConfig:
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    elif args.preset:
        doc = preset_config(args.preset)
    else:
        raise ConfigError("config", "either --config PATH or --preset NAME is required")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.trajectories is not None:
        doc["trajectories"] = args.trajectories
    if args.engine is not None:
        doc["engine"] = args.engine
    return parse_config(doc)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            summary, code = report_command(args.results_dir)
            print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=1))
            return code
        config = _config_from_args(args)
        out_dir = None if args.verify_only else args.out
        if args.command == "run":
            result = run(config, out_dir)
        else:
            result = sweep(config, out_dir)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except RefusalError as exc:
        print(f"numerical refusal: {exc}", file=sys.stderr)
        return 3
    for gate in result.gates:
        print(f"[{'PASS' if gate.passed else 'FAIL'}] {gate.name}: {gate.details}")
    if result.report.get("refusal"):
        print(f"numerical refusal: {result.report['refusal']}", file=sys.stderr)
    elif "sweep_axis" in result.report:
        print(json.dumps(result.report["result"], indent=1))
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
