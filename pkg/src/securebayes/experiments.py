"""Experiment orchestration over the three settings, summaries and plot data.

Settings:

* ``plain``: centralized sampler, eta_t = 1.65e-2 / t, no privacy noise.
* ``dp-central``: centralized private sampler.
* ``dp-he-distributed``: the encrypted three-party protocol.

Each repeat r uses seed ``seed + r`` for the train/test split, the site
partition and every sampler stream; the dataset itself is generated once from
``seed``. Classification metrics are computed on the mean of the last 20
released parameter vectors.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import load_csv, load_partition, synthetic, train_test_split
from .dp_accounting import PrivacySpec
from .models import Dataset, default_aux_c, fit_standardizer, make_model
from .protocol.runner import ConfigError, ProtocolConfig, run_protocol
from .psgld import run_sampler

SETTINGS = ("plain", "dp-central", "dp-he-distributed")
BATCH_DEFAULTS = {"density": (1000, 100), "logistic": (320, 500), "survival": (320, 500)}
TAIL = 20
CURVE_POINTS = 100


@dataclass
class ExperimentConfig:
    model: str = "density"
    setting: str = "dp-he-distributed"
    sites: int = 2
    epsilons: tuple[float, ...] = (1.0,)
    delta: float = 1e-5
    tau: int | None = None
    T: int | None = None
    repeats: int = 10
    split: float = 0.8
    seed: int = 0
    backend: str = "mock"
    he_preset: str = "full"
    out: str | None = None
    strict: bool = False
    gamma: bool = False
    alpha: float = 0.9
    lam: float = 1e-4
    L: float = 1.0
    c: float | None = None
    iters: int | None = None
    data_path: str | None = None
    partition: list | None = None
    partition_path: str | None = None

    def __post_init__(self):
        self.epsilons = tuple(float(e) for e in self.epsilons)
        tau, T = BATCH_DEFAULTS.get(self.model, (None, None))
        self.tau = tau if self.tau is None else int(self.tau)
        self.T = T if self.T is None else int(self.T)

    def validate(self) -> None:
        if self.model not in BATCH_DEFAULTS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}; choose from {SETTINGS}")
        if self.sites < 1 or self.repeats < 1:
            raise ConfigError("sites and repeats must be positive")
        if not self.epsilons or any(e <= 0 for e in self.epsilons):
            raise ConfigError("epsilon grid must be nonempty and positive")
        if not 0 < self.split <= 1:
            raise ConfigError("split fraction must lie in (0, 1]")
        if self.backend not in ("lattice", "mock", "exact"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.gamma and self.setting == "dp-he-distributed":
            raise ConfigError("the divergence term is only available for the central samplers")

    @property
    def aux_c(self) -> float:
        return self.c if self.c is not None else default_aux_c(self.model, self.sites)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        privacy = raw.pop("privacy", {}) or {}
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        if "epsilon" in privacy:
            eps = privacy["epsilon"]
            raw["epsilons"] = eps if isinstance(eps, (list, tuple)) else [eps]
        for key in ("delta", "tau", "T"):
            if key in privacy:
                raw[key] = privacy[key]
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    setting: str
    epsilon: float
    seed: int
    metric: float
    curve: list[tuple[int, float]]
    tail_theta: list[float]
    spec: dict
    ops: dict = field(default_factory=dict)
    phase_ops: dict = field(default_factory=dict)
    iteration_ops: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    seconds: float = 0.0
    range_flags: int = 0


@dataclass
class RunReport:
    config: ExperimentConfig
    runs: list[RunResult]
    metric_name: str

    def metric_by_epsilon(self) -> dict[float, list[float]]:
        out: dict[float, list[float]] = {}
        for r in self.runs:
            out.setdefault(r.epsilon, []).append(r.metric)
        return out

    def mean_metric(self, epsilon: float) -> float:
        return float(np.mean(self.metric_by_epsilon()[epsilon]))

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "metric": self.metric_name,
                "runs": [asdict(r) for r in self.runs]}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, default=_jsonable))
        return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def metric_name(model: str) -> str:
    return "theta_err" if model == "density" else "accuracy"


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    data = load_csv(cfg.data_path, cfg.model) if cfg.data_path else synthetic(cfg.model, cfg.seed)
    if cfg.partition_path:
        data = data.with_partition(load_partition(cfg.partition_path, data.n))
    return data


def _split(cfg: ExperimentConfig, data: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    # density is judged against the generating parameters and uses every point
    if cfg.model == "density" or cfg.split >= 1.0:
        return data, data
    if data.partition:
        raise ConfigError("a fixed partition file cannot be combined with a random train/test split; set split=1")
    return train_test_split(data, seed, cfg.split)


def _curve(model, thetas: np.ndarray, test: Dataset) -> list[tuple[int, float]]:
    steps = thetas.shape[0]
    idx = np.unique(np.linspace(0, steps - 1, min(CURVE_POINTS, steps)).astype(int))
    return [(int(i) + 1, model.metric(thetas[i], test)) for i in idx]


def run_single(cfg: ExperimentConfig, data: Dataset, epsilon: float, repeat: int) -> RunResult:
    seed = cfg.seed + repeat
    train, test = _split(cfg, data, seed)
    model = make_model(cfg.model)
    start = time.perf_counter()
    extra = {}
    if cfg.setting == "dp-he-distributed":
        pcfg = ProtocolConfig(
            model=cfg.model, sites=cfg.sites, partition=cfg.partition, he_preset=cfg.he_preset, epsilon=epsilon,
            delta=cfg.delta, tau=cfg.tau, T=cfg.T, seed=seed, backend=cfg.backend, alpha=cfg.alpha, lam=cfg.lam,
            L=cfg.L, c=cfg.aux_c, iters=cfg.iters, strict=cfg.strict)
        res = run_protocol(pcfg, train)
        traj = res.trajectory
        if res.standardizer is not None:
            test = res.standardizer.apply(test)
        spec = res.spec
        extra = dict(ops=res.ops, phase_ops=res.phase_ops, iteration_ops=res.iteration_ops,
                     timings=res.timings, range_flags=len(res.range_flags))
    else:
        if cfg.model != "density":
            st = fit_standardizer(train.X)
            train, test = st.apply(train), st.apply(test)
        try:
            spec = PrivacySpec(epsilon, cfg.delta, cfg.tau, cfg.T, train.n, cfg.L, cfg.lam, cfg.alpha)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        mode = "plain" if cfg.setting == "plain" else "dp"
        traj = run_sampler(model, train, spec, mode, seed, c=cfg.aux_c, gamma_term=cfg.gamma,
                           strict=cfg.strict, iters=cfg.iters)
    seconds = time.perf_counter() - start
    tail = traj.tail_mean(TAIL)
    return RunResult(cfg.setting, epsilon, seed, model.metric(tail, test), _curve(model, traj.thetas, test),
                     tail.tolist(), asdict(spec), seconds=seconds, **extra)


def run_experiment(cfg: ExperimentConfig, data: Dataset | None = None) -> RunReport:
    """All repeats over the epsilon grid for one setting; persists the report when ``cfg.out`` is set."""
    cfg.validate()
    data = load_dataset(cfg) if data is None else data
    runs = [run_single(cfg, data, eps, r) for eps in cfg.epsilons for r in range(cfg.repeats)]
    report = RunReport(cfg, runs, metric_name(cfg.model))
    if cfg.out:
        out = Path(cfg.out)
        report.save(out / f"report_{cfg.model}_{cfg.setting}.json")
        emit_plot_data([report], "learning-curve", out)
    return report


@dataclass
class Summary:
    rows: list[dict]
    deltas: dict[float, float]
    op_table: list[dict]

    def text(self) -> str:
        lines = [f"{'setting':<20}{'epsilon':>10}{'mean':>12}{'std':>10}{'n':>4}"]
        for r in self.rows:
            lines.append(f"{r['setting']:<20}{r['epsilon']:>10g}{r['mean']:>12.4f}{r['std']:>10.4f}{r['n']:>4}")
        for eps, d in sorted(self.deltas.items()):
            lines.append(f"dp-he-distributed minus dp-central at epsilon={eps:g}: {d:+.4f}")
        if self.op_table:
            lines.append(f"{'phase':<14}{'party':<8}{'seconds':>10}{'HM':>9}{'SM':>9}{'rot':>8}{'enc':>7}{'dec':>7}")
            for r in self.op_table:
                lines.append(f"{r['phase']:<14}{r['party']:<8}{r['seconds']:>10.3f}{r['HM']:>9}{r['SM']:>9}"
                             f"{r['rot']:>8}{r['enc']:>7}{r['dec']:>7}")
        return "\n".join(lines)


def compare_settings(*reports: RunReport) -> Summary:
    """Metric table per (setting, epsilon), dp-he minus dp-central deltas and the op/timing table."""
    if not reports:
        raise ConfigError("nothing to compare")
    base = reports[0].config
    for rep in reports[1:]:
        c = rep.config
        same = (c.model, c.epsilons, c.repeats, c.seed, c.tau, c.T, c.data_path) == \
               (base.model, base.epsilons, base.repeats, base.seed, base.tau, base.T, base.data_path)
        if not same:
            raise ConfigError("reports were produced with mismatched configurations")
    rows = []
    means: dict[tuple[str, float], float] = {}
    for rep in reports:
        for eps, vals in sorted(rep.metric_by_epsilon().items()):
            means[(rep.config.setting, eps)] = float(np.mean(vals))
            rows.append({"setting": rep.config.setting, "epsilon": eps, "mean": float(np.mean(vals)),
                         "std": float(np.std(vals)), "n": len(vals)})
    deltas = {eps: means[("dp-he-distributed", eps)] - means[("dp-central", eps)]
              for (s, eps) in means if s == "dp-he-distributed" and ("dp-central", eps) in means}
    op_table = []
    for rep in reports:
        if rep.config.setting == "dp-he-distributed":
            op_table = timing_rows(rep)
    return Summary(rows, deltas, op_table)


_PHASES = {"keygen": "precompute", "standardize": "precompute", "normalize": "precompute", "iterate": "iterate"}


def timing_rows(report: RunReport) -> list[dict]:
    """Per phase and party-role averages over runs: seconds and op counts (sites summed)."""
    acc: dict[tuple[str, str], dict] = {}
    runs = [r for r in report.runs if r.phase_ops]
    for r in runs:
        for party, phases in r.phase_ops.items():
            role = "sites" if party.startswith("site") else party
            for phase, counts in phases.items():
                row = acc.setdefault((phase, role), {"seconds": 0.0, "HM": 0, "SM": 0, "rot": 0, "enc": 0, "dec": 0})
                for k in ("HM", "SM", "rot", "enc", "dec"):
                    row[k] += counts.get(k, 0)
        for party, times in r.timings.items():
            role = "sites" if party.startswith("site") else party
            for phase, sec in times.items():
                acc.setdefault((_PHASES.get(phase, phase), role),
                               {"seconds": 0.0, "HM": 0, "SM": 0, "rot": 0, "enc": 0, "dec": 0})["seconds"] += sec
    n = max(1, len(runs))
    out = []
    for (phase, role), row in sorted(acc.items()):
        out.append({"phase": phase, "party": role, "seconds": row["seconds"] / n,
                    **{k: row[k] // n for k in ("HM", "SM", "rot", "enc", "dec")}})
    return out


PLOT_KINDS = ("learning-curve", "epsilon-sweep", "timing")


def emit_plot_data(reports, kind: str, out_dir: str | Path) -> list[Path]:
    """Write CSV plot data; returns the files written.

    learning-curve: ``curve_<model>_<setting>_eps<e>.csv`` with columns iter,<metric>
    (mean over repeats). epsilon-sweep: ``epsilon_sweep_<model>.csv`` with one row per
    (setting, epsilon). timing: ``timing_<model>.csv`` with one row per (phase, party).
    """
    if isinstance(reports, RunReport):
        reports = [reports]
    if kind not in PLOT_KINDS:
        raise ValueError(f"kind must be one of {PLOT_KINDS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    model = reports[0].config.model
    if kind == "learning-curve":
        for rep in reports:
            for eps in rep.config.epsilons:
                curves = [r.curve for r in rep.runs if r.epsilon == eps]
                iters = [i for i, _ in curves[0]]
                vals = np.mean([[v for _, v in c] for c in curves], axis=0)
                path = out / f"curve_{model}_{rep.config.setting}_eps{eps:g}.csv"
                _write(path, ["iter", rep.metric_name], zip(iters, vals.tolist()))
                written.append(path)
    elif kind == "epsilon-sweep":
        rows = []
        for rep in reports:
            for eps, vals in sorted(rep.metric_by_epsilon().items()):
                rows.append((rep.config.setting, eps, float(np.mean(vals)), float(np.std(vals)), len(vals)))
        path = out / f"epsilon_sweep_{model}.csv"
        _write(path, ["setting", "epsilon", f"{reports[0].metric_name}_mean", f"{reports[0].metric_name}_std",
                      "repeats"], rows)
        written.append(path)
    else:
        rows = []
        for rep in reports:
            for r in timing_rows(rep):
                rows.append((r["phase"], r["party"], r["seconds"], r["HM"], r["SM"], r["rot"], r["enc"], r["dec"]))
        path = out / f"timing_{model}.csv"
        _write(path, ["phase", "party", "seconds", "HM", "SM", "rot", "enc", "dec"], rows)
        written.append(path)
    return written


def _write(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def with_setting(cfg: ExperimentConfig, setting: str) -> ExperimentConfig:
    return replace(cfg, setting=setting)
