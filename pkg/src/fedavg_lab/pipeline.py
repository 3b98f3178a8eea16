"""Probe, plan, run and verify stages over an output directory.

Each stage reads what earlier stages wrote, so invoking the stages one by one
produces the same files as :func:`run_pipeline`. Artifacts:

``probe.json``, ``plan.json``, ``run_<seed>.csv``, ``gd.csv``,
``verdict.json`` and ``manifest.json`` (file digests plus per-stage timings).
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from fedavg_lab import __version__
from fedavg_lab.artifacts import file_sha256, read_json, read_run_csv, write_json, write_run_csv
from fedavg_lab.config import AUTO, ExperimentConfig, serialize
from fedavg_lab.engine import FedConfig, Trajectory, run_fedavg, run_gd
from fedavg_lab.errors import ConfigError, MonitorError, PlanError
from fedavg_lab.monitor import (
    check_drift_bound,
    check_envelope,
    check_gd_contraction,
    drift_bounds,
    estimate_l_star,
)
from fedavg_lab.objectives import Problem
from fedavg_lab.planner import RatePlan, make_plan, plan_gd
from fedavg_lab.probes import AssumptionConstants, ProbeRegion, probe
from fedavg_lab.synthesis import build_problem, dataset_hash

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2
THREADS_ENV = "FEDAVG_LAB_THREADS"


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1").strip() or "1"
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0, got {value}")
    return value if value > 0 else (os.cpu_count() or 1)


class Workspace:
    """An output directory bound to one configuration."""

    def __init__(self, cfg: ExperimentConfig, out: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.output)
        self.hash = cfg.config_hash()
        self._problem: Problem | None = None

    @property
    def problem(self) -> Problem:
        if self._problem is None:
            self._problem = build_problem(self.cfg)
        return self._problem

    def path(self, name: str) -> Path:
        return self.out / name

    def run_path(self, seed: int) -> Path:
        return self.path(f"run_{seed}.csv")

    def prepare(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)

    def load(self, name: str) -> dict:
        path = self.path(name)
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run the stage that writes it first")
        obj = read_json(path)
        self.check_hash(obj.get("config_hash"), path)
        return obj

    def check_hash(self, found: str | None, path: Path) -> None:
        if found != self.hash:
            raise MonitorError(f"{path}: config hash {found} does not match the current config ({self.hash})")


# ---------------------------------------------------------------------------
# stages


def stage_probe(ws: Workspace) -> dict | None:
    """Fit the constants (config overrides win). Skipped when rates are explicit or constants complete."""
    cfg = ws.cfg
    if not cfg.needs_probe:
        return None
    p = cfg.probe
    problem = ws.problem
    region = ProbeRegion(problem.init, p.radius, p.pairs, p.seed)
    report = probe(problem, region, batch_size=cfg.fedavg.B, M=p.M, sigma_points=p.points, full_batch=cfg.fedavg.full_batch)
    out = report.to_dict()
    overrides = cfg.constants.given()
    out["fitted"] = dict(out["constants"])
    out["constants"] = report.constants.replace(**overrides).to_dict()
    out["overrides"] = sorted(overrides)
    out["config_hash"] = ws.hash
    write_json(ws.path("probe.json"), out)
    return out


def _constants(ws: Workspace) -> AssumptionConstants | None:
    cfg = ws.cfg
    if cfg.constants.complete:
        return AssumptionConstants(**cfg.constants.given())
    if cfg.needs_probe:
        return AssumptionConstants.from_dict(ws.load("probe.json")["constants"])
    return None


def stage_plan(ws: Workspace) -> dict:
    cfg = ws.cfg
    fa = cfg.fedavg
    problem = ws.problem
    consts = _constants(ws)
    if cfg.monitor.l_star is not None:
        l_star, method = cfg.monitor.l_star, "config"
    else:
        l_star, method = estimate_l_star(problem)
    gap0 = problem.loss(problem.init) - l_star
    eta_l = None if fa.eta_l == AUTO else float(fa.eta_l)
    eta_g = None if fa.eta_g == AUTO else float(fa.eta_g)
    fed: dict = {"K": fa.K, "eta_l": eta_l, "eta_g": eta_g, "lambda1": None, "lambda2": None}
    if consts is not None:
        plan = make_plan(
            consts,
            fa.K,
            eta_l=eta_l,
            eta_g=eta_g,
            epsilon=cfg.epsilon,
            initial_gap=gap0,
            eta_g_sentinel=fa.eta_g_sentinel,
        )
        fed = plan.to_dict()
    if fed["eta_l"] is None or fed["eta_g"] is None:
        raise PlanError("rates are 'auto' but no constants are available")
    if fa.R == AUTO:
        if fed.get("R") is None:
            raise PlanError("R = auto needs constants and epsilon")
        R = max(1, int(fed["R"]))
    else:
        R = int(fa.R)
    run = {
        "N": cfg.clients.N,
        "K": fa.K,
        "eta_l": fed["eta_l"],
        "eta_g": fed["eta_g"],
        "R": R,
        "batch_size": fa.B,
        "full_batch": fa.full_batch,
    }
    gd: dict = {"T": cfg.gd.T}
    if consts is None:
        gd["skipped"] = "no constants"
    elif cfg.gd.T == 0:
        gd["skipped"] = "gd.T = 0"
    else:
        try:
            eta, lam = plan_gd(consts)
            gd.update(eta=eta, lam=lam)
        except PlanError as exc:
            gd["skipped"] = str(exc)
    out = {
        "config_hash": ws.hash,
        "constants": consts.to_dict() if consts is not None else None,
        "l_star": l_star,
        "l_star_method": method,
        "initial_loss": problem.loss(problem.init),
        "gap0": gap0,
        "epsilon": cfg.epsilon,
        "fedavg": fed,
        "run": run,
        "gd": gd,
    }
    write_json(ws.path("plan.json"), out)
    return out


def _envelope_column(plan: dict, rounds: int) -> list[float | None]:
    fed = plan["fedavg"]
    if fed.get("lambda1") is None:
        return [None] * (rounds + 1)
    l1, l2, gap0 = fed["lambda1"], fed["lambda2"], plan["gap0"]
    return [(1.0 - l1) ** r * gap0 + 2.0 * l2 for r in range(rounds + 1)]


def _drift_column(plan: dict, traj: Trajectory) -> list[float | None]:
    consts = plan["constants"]
    out: list[float | None] = [None]
    if consts is None:
        return out * (len(traj.rounds) + 1)
    run = plan["run"]
    sigma = 0.0 if run["full_batch"] else consts["sigma"]
    losses = traj.losses
    for i in range(len(traj.rounds)):
        out.append(drift_bounds(run["eta_l"], run["K"], consts["tau2"], sigma, losses[i])[0])
    return out


def run_one_seed(ws: Workspace, plan: dict, seed: int) -> Trajectory:
    run = plan["run"]
    fc = FedConfig(
        run["N"], run["K"], run["eta_l"], run["eta_g"], run["R"], run["batch_size"], seed, run["full_batch"]
    )
    traj = run_fedavg(ws.problem, fc, constants=plan["constants"])
    meta = {"config_hash": ws.hash, "kind": "fedavg", "seed": seed, "run_config": fc.to_dict()}
    write_run_csv(ws.run_path(seed), traj, meta, _drift_column(plan, traj), _envelope_column(plan, fc.R))
    return traj


def stage_run(ws: Workspace, seed: int | None = None) -> list[Trajectory]:
    """FedAvg for every configured seed (or just ``seed``), then the GD baseline."""
    plan = ws.load("plan.json")
    seeds = list(ws.cfg.seeds) if seed is None else [seed]
    ws.problem  # build once, before any fan-out
    workers = min(thread_count(), len(seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trajs = list(pool.map(lambda s: run_one_seed(ws, plan, s), seeds))
    else:
        trajs = [run_one_seed(ws, plan, s) for s in seeds]
    if seed is None:
        gd = plan["gd"]
        if "eta" in gd:
            traj = run_gd(ws.problem, gd["eta"], gd["T"])
            gap0 = traj.initial_loss - plan["l_star"]
            env = [(1.0 - gd["lam"]) ** t * gap0 for t in range(gd["T"] + 1)]
            meta = {"config_hash": ws.hash, "kind": "gd", "run_config": {"eta": gd["eta"], "T": gd["T"]}}
            write_run_csv(ws.path("gd.csv"), traj, meta, None, env)
    return trajs


def _load_runs(ws: Workspace) -> list[Trajectory]:
    trajs = []
    for seed in ws.cfg.seeds:
        path = ws.run_path(seed)
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run the 'run' stage first")
        log = read_run_csv(path)
        ws.check_hash(log.meta.get("config_hash"), path)
        trajs.append(log.trajectory())
    return trajs


def _combine(statuses: list[str]) -> str:
    if "fail" in statuses:
        return "fail"
    if statuses and all(s == "vacuous" for s in statuses):
        return "vacuous"
    return "pass" if statuses else "vacuous"


def stage_verify(ws: Workspace) -> tuple[int, dict]:
    plan = ws.load("plan.json")
    trajs = _load_runs(ws)
    consts = AssumptionConstants.from_dict(plan["constants"]) if plan["constants"] is not None else None
    details = []

    fed = plan["fedavg"]
    if fed.get("lambda1") is None:
        envelope = "vacuous"
        details.append({"check": "envelope", "status": "vacuous", "reason": "no decay coefficients"})
    else:
        rep = check_envelope(trajs, RatePlan.from_dict(fed), plan["l_star"])
        envelope = "pass" if rep.passed else "fail"
        details.append({"check": "envelope", **rep.to_dict()})

    gd_plan = plan["gd"]
    gd_path = ws.path("gd.csv")
    if "eta" not in gd_plan or consts is None:
        gd = "vacuous"
        details.append({"check": "gd", "status": "vacuous", "reason": gd_plan.get("skipped", "no constants")})
    else:
        if not gd_path.exists():
            raise FileNotFoundError(f"{gd_path} not found; run the 'run' stage first")
        log = read_run_csv(gd_path)
        ws.check_hash(log.meta.get("config_hash"), gd_path)
        rep = check_gd_contraction(log.trajectory(), gd_plan["eta"], consts, plan["l_star"])
        gd = rep.status
        details.append({"check": "gd", **rep.to_dict()})

    if consts is None:
        drift = "vacuous"
        details.append({"check": "drift", "status": "vacuous", "reason": "no constants"})
    else:
        statuses = []
        for seed, tr in zip(ws.cfg.seeds, trajs):
            rep = check_drift_bound(tr, consts, tr.config)
            statuses.append(rep.status)
            details.append({"check": "drift", "seed": seed, **rep.to_dict()})
        drift = _combine(statuses)

    verdict = {"config_hash": ws.hash, "envelope": envelope, "gd": gd, "drift": drift, "details": details}
    write_json(ws.path("verdict.json"), verdict)
    code = EXIT_FAIL if "fail" in (envelope, gd, drift) else EXIT_OK
    return code, verdict


def write_manifest(ws: Workspace, timing: dict[str, float]) -> dict:
    """Digest every artifact present; ``timing`` is merged into any timings already recorded."""
    path = ws.path("manifest.json")
    previous = read_json(path).get("timing", {}) if path.exists() else {}
    previous.update({k: round(v, 6) for k, v in timing.items()})
    problem = ws.problem
    names = ["probe.json", "plan.json", "gd.csv", "verdict.json"] + [ws.run_path(s).name for s in ws.cfg.seeds]
    files = {n: file_sha256(ws.path(n)) for n in sorted(names) if ws.path(n).exists()}
    manifest = {
        "config_hash": ws.hash,
        "config": serialize(ws.cfg),
        "seeds": list(ws.cfg.seeds),
        "dataset_hash": dataset_hash(problem.data, problem.partition),
        "version": __version__,
        "files": files,
        "timing": previous,
    }
    write_json(path, manifest)
    return manifest


def run_stage(ws: Workspace, name: str, seed: int | None = None) -> int:
    """Run one named stage and refresh the manifest; returns its exit code."""
    ws.prepare()
    t0 = time.perf_counter()
    code = EXIT_OK
    if name == "probe":
        stage_probe(ws)
    elif name == "plan":
        stage_plan(ws)
    elif name == "run":
        stage_run(ws, seed)
    elif name == "verify":
        code, _ = stage_verify(ws)
    else:
        raise ConfigError(f"unknown stage {name!r}")
    write_manifest(ws, {name: time.perf_counter() - t0})
    return code


def run_pipeline(cfg: ExperimentConfig, out: str | Path | None = None) -> int:
    ws = Workspace(cfg, out)
    for name in ("probe", "plan", "run"):
        run_stage(ws, name)
    return run_stage(ws, "verify")
