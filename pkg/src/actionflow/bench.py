"""Experiment orchestration: suite configs, execution, aggregation, curves.

A suite is the cross product {methods x maps x scenarios x seeds}. Each cell
runs one episode on a fresh model copy and yields one flat record; records
are appended to ``records.ndjson`` as they complete (an interrupted run loses
at most the episode in flight) and the file is rewritten in canonical sorted
order on success so reruns are byte-comparable regardless of job count.
Aggregation is a pure function of the records.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import EnsembleDynamicsModel
from .flow import ActionFlowTransformer
from .planning import MppiConfig
from .simulation import (
    BUNDLED_TRACKS,
    EpisodeConfig,
    Method,
    Scenario,
    StreamXConfig,
    TrackMap,
    bundled_track,
    load_track,
    run_episode,
)

#: Gain pairs exercised by the default benchmark suite.
DEFAULT_SCENARIOS = [
    (-1.0, 2.0), (-2.5, 1.0), (2.5, 0.05), (1.0, -1.0), (1.0, -0.5),
    (-1.0, 1.0), (-0.5, 1.0), (2.0, 2.0), (-1.0, -1.0), (0.1, -1.5),
    (-0.5, 0.5),
]

DEFAULT_SEEDS = [0, 1, 2, 3, 4]

SUMMARY_COLUMNS = ("method", "map", "v_gain", "omega_gain", "success_mean",
                   "success_std", "steps_mean", "steps_std")

#: Artifact keys required per method.
_METHOD_ARTIFACTS = {
    Method.AFM: ("dynamics", "afm"),
    Method.AFM_DR: ("dynamics_dr", "afm_dr"),
    Method.ONLINE_PE: ("dynamics",),
    Method.FROZEN_PE: ("dynamics",),
    Method.STREAMX_PE: ("dynamics_streamx",),
    Method.PHYSICS: (),
}


class ConfigError(ValueError):
    """Raised for malformed or inconsistent suite configurations."""


@dataclass
class SuiteConfig:
    methods: list[Method]
    scenarios: list[tuple[float, float]]
    maps: list[str]
    seeds: list[int]
    artifacts: dict[str, str]
    episode: dict
    output_dir: str | None = None

    def doc(self) -> dict:
        return {
            "methods": [m.value for m in self.methods],
            "scenarios": [list(s) for s in self.scenarios],
            "maps": list(self.maps),
            "seeds": list(self.seeds),
            "artifacts": dict(self.artifacts),
            "episode": dict(self.episode),
            "output_dir": self.output_dir,
        }

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.doc(), sort_keys=True).encode()).hexdigest()[:16]


_EPISODE_KEYS = {
    "max_steps": 5000,
    "delta_m": 1.0,
    "dt": 0.1,
    "ode_steps": 10,
    "regime_error_refresh": False,
    "onset_fraction": 0.15,
    "revert_fraction": 0.80,
    "cost_weights": [1.0, 0.05, 10.0],
    "mppi": {},
    "streamx": {},
}
_MPPI_KEYS = ("population", "horizon", "temperature", "noise_sigma", "smoothing")
_STREAMX_KEYS = ("gamma_lambda", "step_size", "kappa_scale")
_TOP_KEYS = ("methods", "scenarios", "maps", "seeds", "artifacts", "episode",
             "output_dir")


def _reject_unknown(doc: dict, allowed, where: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}; "
                          f"allowed: {sorted(allowed)}")


def parse_config(doc: dict, base_dir: Path | None = None) -> SuiteConfig:
    """Validate a config document, fill defaults, and check artifact files."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "config root")

    try:
        methods = [Method(m) for m in doc.get("methods", [])]
    except ValueError as exc:
        raise ConfigError(f"bad method name: {exc}") from None
    if not methods:
        raise ConfigError("methods must be a nonempty list")

    scenarios = [tuple(float(g) for g in pair)
                 for pair in doc.get("scenarios", DEFAULT_SCENARIOS)]
    if not scenarios or any(len(s) != 2 for s in scenarios):
        raise ConfigError("scenarios must be a nonempty list of [v_gain, omega_gain]")

    maps = list(doc.get("maps", list(BUNDLED_TRACKS)))
    if not maps:
        raise ConfigError("maps must be a nonempty list")

    seeds = [int(s) for s in doc.get("seeds", DEFAULT_SEEDS)]
    if not seeds:
        raise ConfigError("seeds must be a nonempty list")

    episode = dict(_EPISODE_KEYS)
    given = doc.get("episode", {})
    _reject_unknown(given, _EPISODE_KEYS, "episode")
    episode.update(given)
    _reject_unknown(episode.get("mppi", {}), _MPPI_KEYS, "episode.mppi")
    _reject_unknown(episode.get("streamx", {}), _STREAMX_KEYS, "episode.streamx")

    artifacts = dict(doc.get("artifacts", {}))
    base = Path(base_dir) if base_dir else Path.cwd()
    resolved = {}
    for key, value in artifacts.items():
        if key not in {"dynamics", "afm", "dynamics_dr", "afm_dr",
                       "dynamics_streamx"}:
            raise ConfigError(f"unknown artifact key {key!r}")
        path = Path(value)
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError(f"artifact file does not exist: {path}")
        resolved[key] = str(path)
    for method in methods:
        for key in _METHOD_ARTIFACTS[method]:
            if key not in resolved:
                raise ConfigError(
                    f"method {method.value!r} requires artifact {key!r}")

    for name in maps:
        if name not in BUNDLED_TRACKS:
            path = Path(name)
            if not path.is_absolute():
                path = base / name
            if not path.exists():
                raise ConfigError(f"map is neither bundled nor a file: {name}")

    return SuiteConfig(methods=methods, scenarios=scenarios, maps=maps,
                       seeds=seeds, artifacts=resolved, episode=episode,
                       output_dir=doc.get("output_dir"))


def load_config(path) -> SuiteConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return parse_config(doc, base_dir=path.parent)


def _resolve_track(name: str) -> TrackMap:
    if name in BUNDLED_TRACKS:
        return bundled_track(name)
    return load_track(name)


def _episode_config(suite_episode: dict, method: Method, track: TrackMap,
                    scenario: tuple[float, float], seed: int) -> EpisodeConfig:
    e = suite_episode
    return EpisodeConfig(
        method=method,
        track=track,
        scenario=Scenario(scenario[0], scenario[1],
                          onset_fraction=e["onset_fraction"],
                          revert_fraction=e["revert_fraction"]),
        seed=seed,
        max_steps=e["max_steps"],
        delta_m=e["delta_m"],
        dt=e["dt"],
        ode_steps=e["ode_steps"],
        regime_error_refresh=e["regime_error_refresh"],
        mppi=MppiConfig(**e["mppi"]),
        cost_weights=tuple(e["cost_weights"]),
        streamx=StreamXConfig(**e["streamx"]),
    )


class _ArtifactCache:
    """Per-process artifact store keyed by path."""

    def __init__(self):
        self._dynamics: dict[str, EnsembleDynamicsModel] = {}
        self._afm: dict[str, ActionFlowTransformer] = {}
        self._tracks: dict[str, TrackMap] = {}

    def dynamics(self, path: str) -> EnsembleDynamicsModel:
        if path not in self._dynamics:
            self._dynamics[path] = EnsembleDynamicsModel.load(path)
        return self._dynamics[path]

    def afm(self, path: str) -> ActionFlowTransformer:
        if path not in self._afm:
            self._afm[path] = ActionFlowTransformer.load(path)
        return self._afm[path]

    def track(self, name: str) -> TrackMap:
        if name not in self._tracks:
            self._tracks[name] = _resolve_track(name)
        return self._tracks[name]


_WORKER_CACHE = _ArtifactCache()


def _transition_steps(gain_trace: np.ndarray):
    """First step of the intervention window and of the reversion, if any."""
    active = ~np.all(gain_trace == 1.0, axis=1)
    if not active.any():
        return None, None
    onset = int(np.argmax(active))
    after = active[onset:]
    if after.all():
        return onset, None
    return onset, onset + int(np.argmax(~after))


def run_cell(config_doc: dict, method_value: str, map_name: str,
             scenario: list, seed: int) -> dict:
    """Execute one suite cell; returns the flat record (never raises)."""
    record = {
        "method": method_value,
        "map": map_name,
        "v_gain": float(scenario[0]),
        "omega_gain": float(scenario[1]),
        "seed": int(seed),
    }
    try:
        config = parse_config(config_doc)
        method = Method(method_value)
        track = _WORKER_CACHE.track(map_name)
        episode_config = _episode_config(config.episode, method, track,
                                         tuple(scenario), seed)
        keys = _METHOD_ARTIFACTS[method]
        dynamics = _WORKER_CACHE.dynamics(config.artifacts[keys[0]]) if keys else None
        transformer = (_WORKER_CACHE.afm(config.artifacts[keys[1]])
                       if len(keys) > 1 else None)
        result = run_episode(episode_config, dynamics=dynamics,
                             transformer=transformer)
        onset, revert = _transition_steps(result.gain_trace)
        record.update({
            "status": "ok",
            "success_rate": result.success_rate,
            "steps": result.steps,
            "reached": result.reached,
            "total_waypoints": result.total_waypoints,
            "onset_step": onset,
            "revert_step": revert,
            "waypoint_steps": result.waypoint_steps,
            "loss_trace": [float(v) for v in result.loss_trace],
            "flag_trace": [int(v) for v in result.flag_trace],
        })
    except Exception as exc:  # noqa: BLE001 - cell failures must not kill the suite
        record.update({"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
    return record


def record_sort_key(record: dict):
    return (record["method"], record["map"], record["v_gain"],
            record["omega_gain"], record["seed"])


@dataclass
class SuiteResults:
    records: list[dict]
    meta: dict = field(default_factory=dict)

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.records if r.get("status") != "ok"]

    def ok(self) -> list[dict]:
        return [r for r in self.records if r.get("status") == "ok"]


def write_records(results: SuiteResults, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "records.ndjson"
    lines = [json.dumps(r, sort_keys=True)
             for r in sorted(results.records, key=record_sort_key)]
    path.write_text("\n".join(lines) + "\n")
    (out_dir / "meta.json").write_text(json.dumps(results.meta, indent=2))
    return path


def read_records(path) -> SuiteResults:
    path = Path(path)
    if path.is_dir():
        path = path / "records.ndjson"
    records = [json.loads(line) for line in path.read_text().splitlines() if line]
    meta_path = path.parent / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return SuiteResults(records=records, meta=meta)


def run_suite(config: SuiteConfig, jobs: int = 1, out_dir=None,
              progress=None) -> SuiteResults:
    """Run every cell of the suite; isolated models, deterministic per cell.

    With ``out_dir`` set, records are appended incrementally to
    ``records.partial.ndjson`` and the canonical sorted ``records.ndjson`` is
    written at the end.
    """
    cells = [(m.value, map_name, list(scenario), seed)
             for m in config.methods
             for map_name in config.maps
             for scenario in config.scenarios
             for seed in config.seeds]
    config_doc = config.doc()

    out_path = None
    partial = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        partial = (out_path / "records.partial.ndjson").open("w")

    records = []

    def _handle(record: dict) -> None:
        records.append(record)
        if partial is not None:
            partial.write(json.dumps(record, sort_keys=True) + "\n")
            partial.flush()
        if progress is not None:
            progress(record)

    try:
        if jobs <= 1:
            for cell in cells:
                _handle(run_cell(config_doc, *cell))
        else:
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(run_cell, config_doc, *cell)
                           for cell in cells]
                for future in concurrent.futures.as_completed(futures):
                    _handle(future.result())
    finally:
        if partial is not None:
            partial.close()

    results = SuiteResults(
        records=records,
        meta={
            "config": config_doc,
            "config_hash": config.config_hash,
            "n_cells": len(cells),
            "n_failed": len([r for r in records if r.get("status") != "ok"]),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        },
    )
    if out_path is not None:
        write_records(results, out_path)
    return results


def aggregate(results: SuiteResults) -> list[dict]:
    """Per-(method, map, scenario) means and sample stds, plus per-method
    overall rows (map == "overall")."""
    ok = results.ok()
    if not ok:
        raise ValueError("no successful records to aggregate")

    def stats(values):
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return float(arr.mean()), std

    groups: dict[tuple, list[dict]] = {}
    for r in ok:
        groups.setdefault(
            (r["method"], r["map"], r["v_gain"], r["omega_gain"]), []).append(r)

    rows = []
    for (method, map_name, v_gain, omega_gain), recs in sorted(groups.items()):
        s_mean, s_std = stats([r["success_rate"] for r in recs])
        t_mean, t_std = stats([r["steps"] for r in recs])
        rows.append({
            "method": method, "map": map_name,
            "v_gain": v_gain, "omega_gain": omega_gain,
            "success_mean": s_mean, "success_std": s_std,
            "steps_mean": t_mean, "steps_std": t_std,
        })
    for method in sorted({r["method"] for r in ok}):
        recs = [r for r in ok if r["method"] == method]
        s_mean, s_std = stats([r["success_rate"] for r in recs])
        t_mean, t_std = stats([r["steps"] for r in recs])
        rows.append({
            "method": method, "map": "overall", "v_gain": "", "omega_gain": "",
            "success_mean": s_mean, "success_std": s_std,
            "steps_mean": t_mean, "steps_std": t_std,
        })
    return rows


def write_summary_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([
                row["method"], row["map"],
                _fmt(row["v_gain"]), _fmt(row["omega_gain"]),
                _fmt(row["success_mean"]), _fmt(row["success_std"]),
                _fmt(row["steps_mean"]), _fmt(row["steps_std"]),
            ])
    return path


def _fmt(value) -> str:
    if value == "":
        return ""
    return f"{float(value):.6f}"


def moving_average(trace, window: int) -> np.ndarray:
    """Trailing moving average; partial windows at the head use what exists."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(trace, dtype=np.float64)
    if x.size == 0:
        return x
    csum = np.concatenate([[0.0], np.cumsum(x)])
    out = np.empty_like(x)
    for i in range(x.size):
        lo = max(0, i + 1 - window)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def export_loss_curves(results: SuiteResults, out_dir, window: int = 20) -> list[Path]:
    """One CSV per (method, map, scenario): seed-mean loss per step, its
    trailing moving average, and markers at the mean onset/revert steps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list[dict]] = {}
    for r in results.ok():
        if not r.get("loss_trace"):
            continue
        groups.setdefault(
            (r["method"], r["map"], r["v_gain"], r["omega_gain"]), []).append(r)
    if not groups:
        raise ValueError("no loss traces present in results")

    paths = []
    for (method, map_name, v_gain, omega_gain), recs in sorted(groups.items()):
        traces = [np.asarray(r["loss_trace"]) for r in recs]
        length = max(t.size for t in traces)
        mean_loss = np.zeros(length)
        counts = np.zeros(length)
        for t in traces:
            mean_loss[:t.size] += t
            counts[:t.size] += 1
        mean_loss /= np.maximum(counts, 1)
        smoothed = moving_average(mean_loss, window)

        markers = np.zeros(length, dtype=int)
        for key in ("onset_step", "revert_step"):
            steps = [r[key] for r in recs if r.get(key) is not None]
            if steps:
                idx = int(round(float(np.mean(steps))))
                if 0 <= idx < length:
                    markers[idx] = 1

        map_label = Path(str(map_name)).stem
        name = (f"curve_{method}_{map_label}_v{v_gain:+.2f}_w{omega_gain:+.2f}.csv"
                .replace("+", "p").replace("-", "m"))
        path = out_dir / name
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("step", "mean_loss", "smoothed_loss",
                             "transition_marker"))
            for i in range(length):
                writer.writerow((i, f"{mean_loss[i]:.9f}", f"{smoothed[i]:.9f}",
                                 markers[i]))
        paths.append(path)
    return paths
