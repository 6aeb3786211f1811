"""Federated simulation: clients are trained independently, then merged one at a
time into the global model in a seeded arrival order.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .appearance import AppearanceModel
from .client import ClientPackage, TrainConfig, package_for_server, sample_local_data, train_local, LocalDataset
from .merge import GlobalState, MergeConfig, MergeError, baseline_update, distill_update
from .metrics import EvalReport, evaluate_model
from .scene import SUMMER, WINTER, SyntheticScene

log = logging.getLogger(__name__)

TRACE_FIELDS = ("update", "client_id", "status", "threshold", "overlap", "n_gaussians",
                "n_union", "teacher_psnr", "eval_psnr", "bank_size")


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 10
    k_range: tuple = (25, 35)
    overlap_threshold: float = 20
    threshold_decay: float = 0.5
    strategy: str = "distill"  # distill | replace | voxel
    train: TrainConfig = TrainConfig()
    merge: MergeConfig = MergeConfig()
    init_noise: float = 0.05
    init_random_ratio: float = 0.2
    client_tint_std: float = 0.0  # per-client exposure tint, also applied per validation view
    eval_every: int = 0  # 0: evaluate only the final model
    eval_views: int | None = None
    eval_iterations: int = 100
    eval_lr: float = 0.05
    summer_clients: int = 4
    winter_clients: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be at least 1")
        if self.strategy not in ("distill", "replace", "voxel"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.threshold_decay < 1.0:
            raise ValueError("threshold_decay must lie in (0, 1)")


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    evaluations: dict = field(default_factory=dict)  # update index -> EvalReport
    wall_times: list = field(default_factory=list)

    def add(self, **row):
        row = {k: row.get(k, "") for k in TRACE_FIELDS}
        row["update"] = len(self.records)
        self.records.append(row)
        return row

    def column(self, name):
        return [r[name] for r in self.records]

    @property
    def final_count(self) -> int:
        return int(self.records[-1]["n_gaussians"]) if self.records else 0

    def write_csv(self, path):
        """Deterministic columns only, so equal seeds give byte-identical files."""
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: _fmt(r[k]) for k in TRACE_FIELDS})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_trace_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# clients


def _tint(rng, std):
    return np.clip(1.0 + rng.normal(0.0, std, 3), 0.5, 1.5)


def tinted(items, tint) -> list:
    return [(np.clip(img * tint, 0.0, 1.0), cam) for img, cam in items]


def make_client(scene: SyntheticScene, config: FederationConfig, index: int, seed: int,
                regime: str | None = None, prefix: str = "client"):
    """Sample, (optionally tint) and train one client; returns (package, trained)."""
    rng = np.random.default_rng(seed)
    data = sample_local_data(scene.dataset(regime), config.k_range, seed=int(rng.integers(2 ** 31)))
    if config.client_tint_std > 0:
        data = LocalDataset(tinted(data.items, _tint(rng, config.client_tint_std)), data.seed, data.anchor)
    pts = scene.init_points(data.cameras, rng, config.init_noise, config.init_random_ratio, regime)
    cid = f"{prefix}{index:03d}"
    train_cfg = dc_replace(config.train, seed=int(rng.integers(2 ** 31)))
    trained = train_local(data, train_cfg, pts, bounds=scene.bounds, client_id=cid)
    return package_for_server(trained), trained


def train_clients(scene: SyntheticScene, config: FederationConfig, n: int | None = None,
                  regime: str | None = None, prefix: str = "client", stream: int = 0) -> list:
    n = config.n_clients if n is None else n
    seeds = np.random.SeedSequence([config.seed, stream]).generate_state(n)
    packages = []
    for i in range(n):
        pkg, _ = make_client(scene, config, i, int(seeds[i]), regime, prefix)
        log.info("trained %s: %d Gaussians, %d views", pkg.client_id, len(pkg.cloud), len(pkg.cameras))
        packages.append(pkg)
    return packages


def validation_views(scene: SyntheticScene, config: FederationConfig, regime: str | None = None):
    views = scene.validation(regime)
    if config.eval_views is not None:
        views = views[:config.eval_views]
    if config.client_tint_std > 0:
        rng = np.random.default_rng([config.seed, 7])
        views = [(np.clip(img * _tint(rng, config.client_tint_std), 0, 1), cam) for img, cam in views]
    return views


# ---------------------------------------------------------------------------
# protocol


def choose_initial(n: int, rng) -> int:
    """Uniform index of the package that seeds the global model."""
    if n < 1:
        raise ValueError("need at least one package")
    return int(rng.integers(n))


def init_global(packages, seed=0, bounds=None, appearance_seed: int | None = None) -> GlobalState:
    """Pick one package uniformly as the initial global model."""
    rng = np.random.default_rng(seed)
    pkg = packages[choose_initial(len(packages), rng)]
    b = pkg.cloud.bounds if bounds is None else np.asarray(bounds, dtype=np.float64)
    app = AppearanceModel(seed=int(rng.integers(2 ** 31)) if appearance_seed is None else appearance_seed)
    return GlobalState(pkg.cloud, tuple(pkg.cameras), app, b, (pkg.client_id,))


def overlap(state: GlobalState, package: ClientPackage) -> int:
    return len(state.image_ids & package.image_ids)


def select_client(state: GlobalState, pending, threshold: float = 20):
    """First pending package sharing more than `threshold` image ids with the bank."""
    for pkg in pending:
        if overlap(state, pkg) > threshold:
            return pkg
    return None


def merge_packages(state: GlobalState, packages, config: FederationConfig, trace: RunTrace | None = None,
                   views=None, seed=0):
    """Merge `packages` into `state` following the selection rule; returns (state, trace)."""
    trace = RunTrace() if trace is None else trace
    rng = np.random.default_rng(seed)
    pending = [packages[i] for i in rng.permutation(len(packages))]
    threshold = config.overlap_threshold
    while pending:
        pkg = select_client(state, pending, threshold)
        if pkg is None:
            if threshold < 1:
                # nothing overlaps at all: fall back to plain arrival order
                threshold = -1
            else:
                threshold *= config.threshold_decay
            log.info("no client above the overlap threshold; relaxed to %s", threshold)
            continue
        pending.remove(pkg)
        ov = overlap(state, pkg)
        t0 = time.perf_counter()
        try:
            if config.strategy == "distill":
                state, rep = distill_update(state, pkg, config.merge, seed=int(rng.integers(2 ** 63)))
            else:
                state, rep = baseline_update(state, pkg, config.strategy)
        except MergeError as exc:
            log.warning("skipping %s: %s", pkg.client_id, exc)
            trace.add(client_id=pkg.client_id, status="skipped", threshold=float(threshold),
                      overlap=ov, n_gaussians=len(state.cloud), bank_size=len(state.camera_bank))
            trace.wall_times.append(time.perf_counter() - t0)
            threshold = config.overlap_threshold
            continue
        row = trace.add(client_id=pkg.client_id, status="merged", threshold=float(threshold),
                        overlap=ov, n_gaussians=len(state.cloud), n_union=rep.n_union,
                        teacher_psnr=float(rep.teacher_psnr), bank_size=len(state.camera_bank))
        trace.wall_times.append(time.perf_counter() - t0)
        if views is not None and config.eval_every > 0 and row["update"] % config.eval_every == 0:
            rep_eval = _evaluate(state, views, config)
            trace.evaluations[row["update"]] = rep_eval
            row["eval_psnr"] = rep_eval.mean_psnr
        threshold = config.overlap_threshold
    return state, trace


def _evaluate(state, views, config: FederationConfig) -> EvalReport:
    use_app = config.strategy == "distill" and config.merge.use_appearance
    return evaluate_model(state, views, use_app, config.eval_iterations, config.eval_lr)


def run_federation(scene: SyntheticScene, config: FederationConfig = FederationConfig(),
                   packages=None, regime: str | None = None, evaluate: bool = True):
    """Full simulation: train clients (unless given), initialise, merge all. Returns (state, trace)."""
    if packages is None:
        packages = train_clients(scene, config, regime=regime)
    ss = np.random.SeedSequence([config.seed, 1]).generate_state(2)
    state = init_global(packages, seed=int(ss[0]), bounds=scene.bounds)
    trace = RunTrace()
    trace.add(client_id=state.merged_clients[0], status="init", n_gaussians=len(state.cloud),
              bank_size=len(state.camera_bank))
    trace.wall_times.append(0.0)
    views = validation_views(scene, config, regime) if evaluate else None
    rest = [p for p in packages if p.client_id != state.merged_clients[0]]
    state, trace = merge_packages(state, rest, config, trace, views, seed=int(ss[1]))
    if evaluate:
        final = _evaluate(state, views, config)
        trace.evaluations[len(trace.records) - 1] = final
        trace.records[-1]["eval_psnr"] = final.mean_psnr
    return state, trace


@dataclass
class SeasonalResult:
    states: dict  # "S", "W", "S->W", "W->S" -> GlobalState
    traces: dict
    scores: dict  # (model, regime) -> EvalReport

    def psnr(self, model: str, regime: str) -> float:
        return self.scores[(model, regime)].mean_psnr


def run_seasonal(scene: SyntheticScene, config: FederationConfig = FederationConfig(),
                 summer_packages=None, winter_packages=None) -> SeasonalResult:
    """Summer-only, winter-only and the two sequential models, scored on both regimes."""
    if not scene.regimes:
        raise ValueError("run_seasonal needs a seasonal scene")
    if summer_packages is None:
        summer_packages = train_clients(scene, config, config.summer_clients, SUMMER, "summer", stream=11)
    if winter_packages is None:
        winter_packages = train_clients(scene, config, config.winter_clients, WINTER, "winter", stream=12)
    states, traces = {}, {}
    for tag, pkgs, stream in (("S", summer_packages, 21), ("W", winter_packages, 22)):
        cfg = dc_replace(config, seed=config.seed * 1000 + stream)
        states[tag], traces[tag] = run_federation(scene, cfg, pkgs, evaluate=False)
    for tag, base, pkgs, stream in (("S->W", "S", winter_packages, 23), ("W->S", "W", summer_packages, 24)):
        trace = RunTrace(records=[dict(r) for r in traces[base].records])
        states[tag], traces[tag] = merge_packages(states[base], pkgs, config, trace,
                                                  seed=config.seed * 1000 + stream)
    scores = {}
    for regime in (SUMMER, WINTER):
        views = validation_views(scene, config, regime)
        for tag, st in states.items():
            scores[(tag, regime)] = _evaluate(st, views, config)
    return SeasonalResult(states, traces, scores)
