"""End-to-end protocol: key setup, precomputation and the encrypted iterations."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .. import update_plan as plan
from ..approx_poly import fit_preconditioner, rescale_for_sites, to_monomial
from ..data import partition_rows, synthetic
from ..dp_accounting import PrivacySpec, enforce_feasible, step_size
from ..he import load_preset, make_backend
from ..he.backend import diff_counts
from ..he.errors import HeError
from ..models import Dataset, Standardizer, default_aux_c, make_model
from ..psgld import PRIOR_VARIANCE, Trajectory, site_batch_sizes
from ..rng import child_seed
from . import messages as M
from .channel import Fabric
from .masking import mask_moduli
from .parties import Csp, ProtocolAbort, Server, Site


class ConfigError(ValueError):
    pass


@dataclass
class ProtocolConfig:
    model: str = "density"
    sites: int = 2
    partition: list | None = None
    he_preset: str = "full"
    epsilon: float = 1.0
    delta: float = 1e-5
    tau: int = 1000
    T: int = 100
    seed: int = 0
    backend: str = "mock"
    gamma: bool = False
    alpha: float = 0.9
    lam: float = 1e-4
    L: float = 1.0
    c: float | None = None
    iters: int | None = None
    strict: bool = False
    prior_variance: float = PRIOR_VARIANCE
    precompute: bool | None = None
    proportional_batches: bool = False

    @classmethod
    def from_dict(cls, raw: dict) -> "ProtocolConfig":
        raw = dict(raw)
        privacy = raw.pop("privacy", {}) or {}
        if "L" in raw:
            raw["L"] = float(raw["L"])
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        cfg = cls(**raw)
        for key in ("epsilon", "delta", "tau", "T"):
            if key in privacy:
                setattr(cfg, key, privacy[key])
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "ProtocolConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def aux_c(self) -> float:
        return self.c if self.c is not None else default_aux_c(self.model, self.sites)

    @property
    def needs_precompute(self) -> bool:
        # density parameters are the raw data means, so its data stays unscaled
        return self.model != "density" if self.precompute is None else self.precompute


@dataclass
class ProtocolResult:
    trajectory: Trajectory
    fabric: Fabric
    spec: PrivacySpec
    site_data: list[Dataset]
    standardizer: Standardizer | None
    site_coeffs: np.ndarray
    slots: int
    ops: dict[str, dict[str, int]]
    phase_ops: dict[str, dict[str, dict[str, int]]]
    iteration_ops: list[dict]
    csp_decrypts: list[int]
    timings: dict[str, dict[str, float]]
    range_flags: list[dict] = field(default_factory=list)
    batch_sizes: list[int] = field(default_factory=list)

    @property
    def transcript(self) -> list[dict]:
        return self.fabric.records()

    def summary(self) -> dict:
        return {"spec": asdict(self.spec), "ops": self.ops, "timings": self.timings,
                "bytes_sent": dict(self.fabric.bytes_sent), "messages": len(self.fabric.transcript),
                "range_flags": len(self.range_flags)}


@lru_cache(maxsize=8)
def preconditioner_coeffs(lam: float) -> tuple[float, ...]:
    return tuple(to_monomial(fit_preconditioner(lam)))


def _split(data: Dataset, cfg: ProtocolConfig) -> list[Dataset]:
    if data.partition:
        parts = data.partition
        if len(parts) != cfg.sites:
            raise ConfigError(f"partition has {len(parts)} sites, config asks for {cfg.sites}")
    else:
        parts = partition_rows(data.n, cfg.sites, cfg.seed, cfg.partition)
    return [data.take(p) for p in parts]


def run_protocol(cfg: ProtocolConfig, data: Dataset | None = None) -> ProtocolResult:
    """Run precomputation and T' encrypted iterations; abort raises ProtocolAbort.

    On abort the failure cause is appended to the transcript as an Abort message
    and the exception carries the partial fabric as ``exc.fabric``.
    """
    if cfg.sites < 1:
        raise ConfigError("need at least one site")
    if cfg.gamma:
        raise ConfigError("the encrypted update has no divergence term; gamma is available for the central sampler only")
    if data is None:
        data = synthetic(cfg.model, cfg.seed)
    model = make_model(cfg.model)
    params = load_preset(cfg.he_preset)
    try:
        spec = PrivacySpec(cfg.epsilon, cfg.delta, cfg.tau, cfg.T, data.n, cfg.L, cfg.lam, cfg.alpha)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    enforce_feasible(spec, cfg.strict)
    pieces = _split(data, cfg)
    try:
        batch_sizes = site_batch_sizes(cfg.tau, [p.n for p in pieces], cfg.proportional_batches)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    fabric = Fabric()
    backend = lambda role: make_backend(cfg.backend, params, child_seed(cfg.seed, "backend", role))
    csp = Csp(backend("csp"), fabric)
    pk, evk = csp.keygen()
    server = Server(backend("server"), fabric, pk, evk, cfg.seed)
    sites = [Site(k + 1, pieces[k], backend(f"site{k + 1}"), fabric, pk, model, cfg.seed) for k in range(cfg.sites)]
    pids = [s.pid for s in sites]
    parties = [csp, server, *sites]

    try:
        standardizer = _precompute(cfg, csp, server, sites, pids)
        pre_ops = {str(p.pid): p.backend.counter.snapshot() for p in parties}
        d = sites[0].data.d
        layout = plan.BlockLayout(params.slots, d)
        if layout.d_pad > params.slots:
            raise ConfigError(f"d={d} does not fit in {params.slots} slots")
        coeffs = rescale_for_sites(preconditioner_coeffs(cfg.lam), cfg.sites)
        spec = PrivacySpec(cfg.epsilon, cfg.delta, cfg.tau, cfg.T, server.N, cfg.L, cfg.lam, cfg.alpha)
        steps = spec.total_steps if cfg.iters is None else cfg.iters
        server.theta = np.zeros(d)
        thetas, etas, decs = np.empty((steps, d)), np.empty(steps), []
        for i in range(steps):
            t = i + 1
            server.broadcast_theta(pids, t)
            for s, b in zip(sites, batch_sizes):
                s.receive_theta()
                s.iteration(t, layout, b, cfg.aux_c, cfg.L)
            eta = step_size(t, spec)
            server.iteration(pids, t, eta, layout, spec, coeffs, cfg.prior_variance)
            dec0 = csp.backend.counter["dec"]
            csp.release_theta(layout, t)
            decs.append(csp.backend.counter["dec"] - dec0)
            server.receive_theta()
            thetas[i], etas[i] = server.theta, eta
    except (ProtocolAbort, HeError) as exc:
        party = getattr(exc, "party", M.SERVER)
        for other in (M.SERVER, M.CSP, *pids):
            if other != party:
                fabric.send(party, other, "abort", M.ABORT, {"cause": str(exc)})
        if not isinstance(exc, ProtocolAbort):
            exc = ProtocolAbort(party, str(exc))
        exc.fabric = fabric
        raise exc
    # final broadcast so every site holds theta_{T'+1}
    server.broadcast_theta(pids, steps + 1)
    for s in sites:
        s.receive_theta()

    total_ops = {str(p.pid): p.backend.counter.snapshot() for p in parties}
    phase_ops = {pid: {"precompute": pre_ops[pid], "iterate": diff_counts(total_ops[pid], pre_ops[pid])}
                 for pid in total_ops}
    traj = Trajectory(thetas, etas, np.zeros(steps), "dp-he", {"seed": cfg.seed, "c": cfg.aux_c})
    return ProtocolResult(
        trajectory=traj, fabric=fabric, spec=spec, site_data=[s.data for s in sites],
        standardizer=standardizer, site_coeffs=coeffs, slots=params.slots,
        ops=total_ops, phase_ops=phase_ops,
        iteration_ops=server.iteration_ops, csp_decrypts=decs,
        timings={str(p.pid): dict(p.timings) for p in parties},
        range_flags=server.range_flags, batch_sizes=batch_sizes,
    )


def _precompute(cfg, csp: Csp, server: Server, sites: list[Site], pids) -> Standardizer | None:
    full = cfg.needs_precompute
    d = sites[0].data.d
    for s in sites:
        s.send_count(full)
    server.aggregate_count(pids, full)
    csp.release_count(pids, full, d)
    server.receive_count()
    for s in sites:
        s.receive_count(full)
    if not full:
        return None
    for s in sites:
        s.send_variance_part()
    server.aggregate_variance(pids)
    csp.release_variance(pids, d)
    for s in sites:
        s.apply_standardization()
    for s in sites:
        s.send_norm()
    server.mask_norms(pids)
    t1, t2 = mask_moduli()
    csp.masked_max(len(sites), t1 * t2, server.mask.delta)
    server.unmask_max()
    csp.release_max(pids)
    for s in sites:
        s.apply_normalization()
    return sites[0].standardizer()


def secure_max(values, backend: str = "mock", seed: int = 0, he_preset: str = "full") -> float:
    """Run only the masked-maximum subroutine over one value per site.

    Site k holds the single row ``[values[k]]``, so its local max norm is
    ``|values[k]|`` (rounded up to the norm grid). Returns the released maximum.
    """
    params = load_preset(he_preset)
    fabric = Fabric()
    be = lambda role: make_backend(backend, params, child_seed(seed, "backend", role))
    csp = Csp(be("csp"), fabric)
    pk, evk = csp.keygen(rotation_steps=[])
    server = Server(be("server"), fabric, pk, evk, seed)
    sites = [Site(k + 1, Dataset(np.array([[float(v)]])), be(f"site{k + 1}"), fabric, pk, None, seed)
             for k, v in enumerate(values)]
    pids = [s.pid for s in sites]
    for s in sites:
        s.send_norm()
    server.mask_norms(pids)
    t1, t2 = mask_moduli()
    csp.masked_max(len(sites), t1 * t2, server.mask.delta)
    server.unmask_max()
    csp.release_max(pids)
    for s in sites:
        s.apply_normalization()
    return sites[0].max_norm


def export_parity(result: ProtocolResult, path: str | Path) -> None:
    """Write what a cleartext replica needs: site data, coefficients and slot count."""
    path = Path(path)
    arrays = {f"site{k}_X": s.X for k, s in enumerate(result.site_data)}
    for k, s in enumerate(result.site_data):
        for name in ("y", "time", "event"):
            if getattr(s, name) is not None:
                arrays[f"site{k}_{name}"] = getattr(s, name)
    np.savez(path, site_coeffs=result.site_coeffs, slots=result.slots, **arrays)
