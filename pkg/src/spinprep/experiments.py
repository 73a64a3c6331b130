"""Config-driven sweeps over protocol runs, result tables and plot data."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .control import NumericalError
from .dynamics import fidelity_trajectory
from .groundstate import target_state
from .hilbert import ModelSpec, all_up_state
from .protocols import GATES, ProtocolConfig, fit_exponential_scaling, run_protocol, synthesize_gate

log = logging.getLogger(__name__)

KINDS = (
    "fidelity_vs_K",
    "fidelity_vs_T",
    "fidelity_vs_N",
    "three_model",
    "field_landscape",
    "trajectory",
    "gate_sweep",
    "single_run",
)
GRID_KEYS = ("K", "T", "N", "models", "gates")
REQUIRED_GRIDS = {
    "fidelity_vs_K": ("K",),
    "fidelity_vs_T": ("T",),
    "fidelity_vs_N": ("N",),
    "three_model": ("models",),
    "gate_sweep": ("gates", "T"),
}
SPEC_KEYS = ("model", "n_sites", "couplings")
PROTOCOL_KEYS = tuple(f.name for f in fields(ProtocolConfig))
OUT_ENV = "SPINPREP_OUT"
RESULTS_FILE = "results.csv"
COLUMNS = (
    "kind",
    "label",
    "protocol",
    "loss_kind",
    "evolution",
    "n_sites",
    "total_time",
    "n_slices",
    "gate",
    "seed",
    "fidelity",
    "loss",
    "config_hash",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    target: dict
    evolution: dict
    grids: dict = field(default_factory=dict)
    protocols: list = field(default_factory=list)
    output_dir: str = "results"
    seeds: list = field(default_factory=lambda: [0])

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _reject_unknown(mapping: dict, allowed, where: str) -> None:
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected a mapping")
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown key '{where}.{key}'" if where else f"unknown key '{key}'")


def _spec(d: dict, where: str, **override) -> ModelSpec:
    try:
        return ModelSpec(**{**d, **override})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a raw mapping; every unknown key is an error naming that key."""
    _reject_unknown(data, [f.name for f in fields(ExperimentConfig)], "")
    for key in ("kind", "target", "evolution"):
        if key not in data:
            raise ConfigError(f"missing key '{key}'")
    cfg = ExperimentConfig(**data)
    if cfg.kind not in KINDS:
        raise ConfigError(f"kind: unknown experiment kind {cfg.kind!r}")
    _reject_unknown(cfg.target, SPEC_KEYS, "target")
    _reject_unknown(cfg.evolution, SPEC_KEYS, "evolution")
    _reject_unknown(cfg.grids, GRID_KEYS, "grids")
    for name in REQUIRED_GRIDS.get(cfg.kind, ()):
        if not cfg.grids.get(name):
            raise ConfigError(f"grids.{name}: must be non-empty for {cfg.kind}")
    if not cfg.protocols and cfg.kind != "gate_sweep":
        raise ConfigError("protocols: at least one protocol is required")
    for i, p in enumerate(cfg.protocols):
        _reject_unknown(p, PROTOCOL_KEYS, f"protocols[{i}]")
        try:
            ProtocolConfig(**p)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"protocols[{i}]: {exc}") from exc
    if not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seeds: must be a non-empty list of integers")
    for gate in cfg.grids.get("gates", []):
        if gate not in GATES:
            raise ConfigError(f"grids.gates: unknown gate {gate!r}")
    for model in cfg.grids.get("models", []):
        _spec({**cfg.evolution, "model": model, "couplings": None}, "grids.models")
    if cfg.kind != "fidelity_vs_N":
        _spec(cfg.target, "target")
        _spec(cfg.evolution, "evolution")
    return cfg


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("spinprep.presets").iterdir() if p.name.endswith(".json"))


def load_config(path_or_preset: str) -> ExperimentConfig:
    path = Path(path_or_preset)
    if path.exists():
        text = path.read_text()
    elif path_or_preset in preset_names():
        text = resources.files("spinprep.presets").joinpath(f"{path_or_preset}.json").read_text()
    else:
        raise ConfigError(f"no config file or preset named {path_or_preset!r}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return parse_config(data)


def scale_up(cfg: ExperimentConfig, n_sites: int = 10) -> ExperimentConfig:
    """Full-scale variant of a preset: chains of 8 become ``n_sites``, N grids extend to it."""
    target, evolution = dict(cfg.target), dict(cfg.evolution)
    for d in (target, evolution):
        if d.get("n_sites") == 8:
            d["n_sites"] = n_sites
    grids = dict(cfg.grids)
    if "N" in grids and max(grids["N"]) < n_sites:
        grids["N"] = sorted(set(grids["N"]) | set(range(max(grids["N"]) + 1, n_sites + 1)))
    return replace(cfg, target=target, evolution=evolution, grids=grids)


@dataclass(frozen=True)
class Task:
    kind: str
    label: str
    protocol: ProtocolConfig
    target: ModelSpec
    evolution: ModelSpec
    gate: str = ""

    @property
    def config_hash(self) -> str:
        return self.protocol.hash(self.target.to_dict(), self.evolution.to_dict(), self.gate)


@dataclass
class ResultRecord:
    kind: str
    label: str
    protocol: str
    loss_kind: str
    evolution: str
    n_sites: int
    total_time: float
    n_slices: int
    gate: str
    seed: int
    fidelity: float
    loss: float
    config_hash: str
    wall_clock: float = 0.0

    def row(self) -> list:
        return [getattr(self, c) for c in COLUMNS]

    def sort_key(self):
        return (self.label, self.evolution, self.gate, self.n_sites, self.total_time, self.n_slices, self.seed)


def _labels(protocols: list[dict]) -> list[str]:
    names = [ProtocolConfig(**p).protocol.value for p in protocols]
    out = []
    for p, name in zip(protocols, names):
        if names.count(name) > 1:
            name = f"{name}_{ProtocolConfig(**p).loss.value}"
        out.append(name)
    if len(set(out)) != len(out):
        raise ConfigError("protocols: entries must differ in protocol or loss")
    return out


def expand_tasks(cfg: ExperimentConfig) -> list[Task]:
    """Every (grid point x protocol x seed) run, in a fixed order."""
    grids = cfg.grids
    tasks = []
    if cfg.kind == "gate_sweep":
        base = cfg.protocols[0] if cfg.protocols else {"protocol": "gto"}
        evolution = _spec(cfg.evolution, "evolution")
        for gate in grids["gates"]:
            for t in grids["T"]:
                for seed in cfg.seeds:
                    proto = ProtocolConfig(**{**base, "total_time": t, "seed": seed})
                    tasks.append(Task(cfg.kind, gate, proto, evolution, evolution, gate))
        return tasks

    labels = _labels(cfg.protocols)
    points: list[tuple[dict, dict, dict]] = []
    if cfg.kind == "fidelity_vs_K":
        points = [({"n_slices": k}, {}, {}) for k in grids["K"]]
    elif cfg.kind == "fidelity_vs_T":
        points = [({"total_time": t}, {}, {}) for t in grids["T"]]
    elif cfg.kind == "fidelity_vs_N":
        points = [({}, {"n_sites": n}, {"n_sites": n}) for n in grids["N"]]
    elif cfg.kind == "three_model":
        points = [({}, {}, {"model": m, "couplings": None}) for m in grids["models"]]
    else:
        points = [({}, {}, {})]
    for proto_over, target_over, evol_over in points:
        target = _spec(cfg.target, "target", **target_over)
        evolution = _spec(cfg.evolution, "evolution", **evol_over)
        for label, p in zip(labels, cfg.protocols):
            for seed in cfg.seeds:
                proto = ProtocolConfig(**{**p, **proto_over, "seed": seed})
                tasks.append(Task(cfg.kind, label, proto, target, evolution))
    return tasks


def run_task(task: Task) -> tuple[ResultRecord, dict]:
    """Execute one run; returns its record and the arrays kept as artifacts."""
    if task.gate:
        res = synthesize_gate(task.protocol, task.evolution, GATES[task.gate])
        extras = {}
    else:
        target = target_state(task.target)
        psi0 = all_up_state(task.evolution.n_sites)
        res = run_protocol(task.protocol, task.evolution, target, psi0)
        traj = fidelity_trajectory(res.schedule, task.evolution, psi0, target)
        extras = {"trajectory": traj.fidelities}
    extras.update(fields=res.schedule.fields, history=res.history)
    p = task.protocol
    record = ResultRecord(
        kind=task.kind,
        label=task.label,
        protocol=p.protocol.value,
        loss_kind=p.loss.value,
        evolution=task.evolution.model.value,
        n_sites=task.evolution.n_sites,
        total_time=p.total_time,
        n_slices=p.n_slices,
        gate=task.gate,
        seed=p.seed,
        fidelity=res.fidelity,
        loss=res.loss,
        config_hash=task.config_hash,
        wall_clock=res.wall_clock,
    )
    return record, extras


def _write_results(path: Path, cfg: ExperimentConfig, records: list[ResultRecord], complete: bool) -> None:
    records = sorted(records, key=ResultRecord.sort_key)
    buf = io.StringIO()
    buf.write(f"# spinprep {__version__}\n")
    buf.write(f"# config_hash: {cfg.hash()}\n")
    buf.write(f"# seeds: {json.dumps(cfg.seeds)}\n")
    buf.write(f"# complete: {str(complete).lower()}\n")
    buf.write(f"# config: {json.dumps(cfg.to_dict(), sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in records:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _flush(out: Path, cfg: ExperimentConfig, records: list[ResultRecord], complete: bool) -> None:
    _write_results(out / RESULTS_FILE, cfg, records, complete)
    timings = sorted(records, key=ResultRecord.sort_key)
    with open(out / "timings.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_hash", "wall_clock"])
        w.writerows([r.config_hash, f"{r.wall_clock:.3f}"] for r in timings)
    summary = {
        "version": __version__,
        "kind": cfg.kind,
        "config_hash": cfg.hash(),
        "complete": complete,
        "n_records": len(records),
        "best": _best_by_label(records),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")


def _best_by_label(records: list[ResultRecord]) -> dict:
    best: dict = {}
    for r in records:
        key = f"{r.label}|{r.evolution}|{r.gate}|N={r.n_sites}|T={r.total_time}|K={r.n_slices}"
        if key not in best or r.fidelity > best[key]["fidelity"]:
            best[key] = {"fidelity": r.fidelity, "loss": r.loss, "seed": r.seed}
    return best


def output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    return Path(override or os.environ.get(OUT_ENV) or cfg.output_dir)


def run_experiment(cfg: ExperimentConfig, threads: int = 1, out: str | Path | None = None) -> list[ResultRecord]:
    """Run every task of ``cfg`` and write results.csv, timings.csv,
    summary.json and one runs/<hash>.npz per run under the output directory.

    On a numerical failure the finished records are flushed (marked
    incomplete) before the error propagates.
    """
    out = output_dir(cfg, str(out) if out else None)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    tasks = expand_tasks(cfg)
    records: list[ResultRecord] = []

    def collect(record, extras):
        np.savez(out / "runs" / f"{record.config_hash}.npz", **extras)
        records.append(record)
        log.info("%s %s seed=%d f=%.6f", record.label, record.config_hash, record.seed, record.fidelity)

    try:
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                for record, extras in pool.map(run_task, tasks):
                    collect(record, extras)
        else:
            for task in tasks:
                collect(*run_task(task))
    except NumericalError:
        _flush(out, cfg, records, complete=False)
        raise
    _flush(out, cfg, records, complete=True)
    return sorted(records, key=ResultRecord.sort_key)


def read_results(path: str | Path) -> tuple[ExperimentConfig, list[ResultRecord]]:
    path = Path(path)
    if path.is_dir():
        path = path / RESULTS_FILE
    meta, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# ") and ": " in line:
            key, value = line[2:].split(": ", 1)
            meta[key] = value
        elif not line.startswith("#"):
            body.append(line)
    types = {f.name: f.type for f in fields(ResultRecord)}
    conv = {"int": int, "float": float, "str": str}
    for row in csv.DictReader(body):
        rows.append(ResultRecord(**{k: conv[types[k]](v) for k, v in row.items()}))
    return parse_config(json.loads(meta["config"])), rows


def verify(path: str | Path, seed: int = 0, tol: float = 1e-12) -> tuple[bool, ResultRecord, float]:
    """Recompute one randomly chosen record from the embedded config.

    Returns (ok, record, recomputed fidelity).
    """
    cfg, records = read_results(path)
    if not records:
        raise ValueError("results file has no records")
    record = records[np.random.default_rng(seed).integers(len(records))]
    by_hash = {t.config_hash: t for t in expand_tasks(cfg)}
    if record.config_hash not in by_hash:
        return False, record, float("nan")
    fresh, _ = run_task(by_hash[record.config_hash])
    return abs(fresh.fidelity - record.fidelity) <= tol, record, fresh.fidelity


def _load_run(results_dir: Path, record: ResultRecord) -> dict:
    with np.load(results_dir / "runs" / f"{record.config_hash}.npz") as data:
        return {k: data[k] for k in data.files}


def _best_per(records, key):
    best = {}
    for r in records:
        k = key(r)
        if k not in best or r.fidelity > best[k].fidelity:
            best[k] = r
    return best


def _write_table(path: Path, header: list[str], rows: list[list], footer: list[str] = ()) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# columns: " + ", ".join(header) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[repr(v) if isinstance(v, float) else v for v in row] for row in rows])
        for line in footer:
            fh.write(f"# {line}\n")
    return path


def emit_plot_data(records: list[ResultRecord], kind: str, results_dir: str | Path) -> list[Path]:
    """Figure-ready tables built from best-of-seeds runs, written next to the results."""
    if not records:
        raise ValueError("no records to plot")
    results_dir = Path(results_dir)
    labels = sorted({r.label for r in records})
    written = []

    def sweep(x_name, x_of):
        best = _best_per(records, lambda r: (r.label, x_of(r)))
        xs = sorted({x_of(r) for r in records})
        rows = [[x] + [best[(lab, x)].fidelity if (lab, x) in best else "" for lab in labels] for x in xs]
        return xs, best, rows

    if kind == "fidelity_vs_K":
        _, _, rows = sweep("K", lambda r: r.n_slices)
        written.append(_write_table(results_dir / "plot_fidelity_vs_K.csv", ["K"] + [f"f_{l}" for l in labels], rows))
    elif kind == "fidelity_vs_T":
        _, _, rows = sweep("T", lambda r: r.total_time)
        written.append(_write_table(results_dir / "plot_fidelity_vs_T.csv", ["T"] + [f"f_{l}" for l in labels], rows))
    elif kind == "fidelity_vs_N":
        xs, best, rows = sweep("N", lambda r: r.n_sites)
        footer = []
        for lab in labels:
            pts = [(n, best[(lab, n)].fidelity) for n in xs if (lab, n) in best]
            try:
                mu, nu = fit_exponential_scaling(pts)
                footer.append(f"fit {lab}: f = 1 - mu*exp(nu*N), mu={mu!r}, nu={nu!r}")
            except ValueError as exc:
                footer.append(f"fit {lab}: unavailable ({exc})")
        written.append(
            _write_table(results_dir / "plot_fidelity_vs_N.csv", ["N"] + [f"f_{l}" for l in labels], rows, footer)
        )
    elif kind == "gate_sweep":
        gates = sorted({r.gate for r in records})
        best = {}
        for r in records:
            k = (r.gate, r.total_time)
            if k not in best or r.loss < best[k].loss:
                best[k] = r
        ts = sorted({r.total_time for r in records})
        rows = [[t] + [best[(g, t)].loss if (g, t) in best else "" for g in gates] for t in ts]
        written.append(_write_table(results_dir / "plot_gate_sweep.csv", ["T"] + [f"F_{g}" for g in gates], rows))
    elif kind == "trajectory":
        best = _best_per(records, lambda r: r.label)
        trajs = {lab: _load_run(results_dir, best[lab])["trajectory"] for lab in labels}
        k = len(next(iter(trajs.values()))) - 1
        tau = best[labels[0]].total_time / k
        rows = [[i * tau] + [float(trajs[lab][i]) for lab in labels] for i in range(k + 1)]
        written.append(_write_table(results_dir / "plot_trajectory.csv", ["t"] + [f"f_{l}(t)" for l in labels], rows))
    elif kind == "three_model":
        best = _best_per(records, lambda r: (r.label, r.evolution))
        for lab in labels:
            models = sorted(ev for (l, ev) in best if l == lab)
            hists = {ev: _load_run(results_dir, best[(lab, ev)])["history"] for ev in models}
            n = max(len(h) for h in hists.values())
            rows = [[i] + [float(hists[ev][i]) if i < len(hists[ev]) else "" for ev in models] for i in range(n)]
            name = f"plot_three_model_{lab}.csv" if len(labels) > 1 else "plot_three_model.csv"
            written.append(_write_table(results_dir / name, ["epoch"] + [f"loss_{ev}" for ev in models], rows))
    elif kind == "field_landscape":
        best = _best_per(records, lambda r: r.label)
        for lab in labels:
            h = _load_run(results_dir, best[lab])["fields"]
            for a, axis in enumerate("xyz"):
                rows = [[k + 1] + list(map(float, h[k, :, a])) for k in range(h.shape[0])]
                header = ["k"] + [f"n{n + 1}" for n in range(h.shape[1])]
                suffix = f"_{lab}" if len(labels) > 1 else ""
                written.append(_write_table(results_dir / f"plot_landscape{suffix}_{axis}.csv", header, rows))
    elif kind == "single_run":
        rows = [[r.label, r.seed, r.fidelity, r.loss] for r in sorted(records, key=ResultRecord.sort_key)]
        written.append(_write_table(results_dir / "plot_single_run.csv", ["protocol", "seed", "f", "F"], rows))
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
    return written
