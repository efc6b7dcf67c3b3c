"""Experiment plumbing: configs, artifacts, seeded cells and CSV reports.

A run is driven by one YAML config. Artifacts live under an output root:

* ``robot.dmdd``: windowed expert dataset (binary, see :func:`save_dataset`)
* ``policy.dmdf`` + ``policy.dmdf.json``: trained denoiser and its sidecar
* ``demos/``: one hand demonstration per evaluation episode plus a manifest
* ``*.csv``: results

Every evaluation episode is identified by ``(task, seed_index, episode)``;
its scene, demo and noise streams are derived from the root seed, so results
do not depend on worker count or completion order.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import benchmark, demonstrator as dm, policy as pl, refine, retarget as rt, simenv
from .demonstrator import EmbodimentGap
from .tinynet import NetError

log = logging.getLogger(__name__)

DATASET_MAGIC = b"DMDD"
DATASET_VERSION = 1
CSV_HEADER = ["task", "method", "r", "seed", "episodes", "successes", "rate"]

# independent seed streams
STREAM_DATA, STREAM_TRAIN, STREAM_SCENE, STREAM_NOISE, STREAM_KEYPOINTS, STREAM_PROBE = range(6)


class ConfigError(ValueError):
    pass


class ArtifactMismatch(RuntimeError):
    pass


# -- config -----------------------------------------------------------------------

@dataclass
class DataSection:
    episodes: int = 985
    train_tasks: list = field(default_factory=lambda: list(benchmark.TRAIN_TASKS))


@dataclass
class PolicySection:
    iters: int = 40000
    lr: float = 2e-3
    batch_size: int = 256
    hidden: list = field(default_factory=lambda: [256, 256, 256])
    embed_dim: int = 32
    horizon: int = 10
    n_obs: int = 2
    inference_steps: int = 20
    min_snr_gamma: float = 1.0
    object_offsets: bool = True


@dataclass
class RefineSection:
    open_loop_horizon: int = 8
    budget: int = 20


@dataclass
class GapSection:
    wrist_offset: list = field(default_factory=lambda: list(EmbodimentGap().wrist_offset))
    aperture_scale: float = EmbodimentGap().aperture_scale
    jitter: float = EmbodimentGap().jitter
    grasp_lag: int = EmbodimentGap().grasp_lag

    def gap(self) -> EmbodimentGap:
        return EmbodimentGap(tuple(float(v) for v in self.wrist_offset), float(self.aperture_scale),
                             float(self.jitter), int(self.grasp_lag))


@dataclass
class PathsSection:
    data: str = "robot.dmdd"
    checkpoint: str = "policy.dmdf"
    demos: str = "demos"
    results: str = "results"


@dataclass
class BenchmarkConfig:
    seed: int = 0
    tasks: list = field(default_factory=lambda: list(benchmark.HEADLINE_TASKS))
    episodes: int = 50
    seeds: int = 3
    r_grid: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    perturbation: float = benchmark.PERTURBATION
    keypoint_noise: float = 0.05
    ablation_r: float = 0.2
    probe_episodes: int = 20
    data: DataSection = field(default_factory=DataSection)
    policy: PolicySection = field(default_factory=PolicySection)
    refine: RefineSection = field(default_factory=RefineSection)
    gap: GapSection = field(default_factory=GapSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "BenchmarkConfig":
        for t in self.tasks:
            if t not in benchmark.EVAL_TASKS:
                raise ConfigError(f"tasks: unknown task {t!r}")
        for t in self.data.train_tasks:
            if t not in benchmark.TRAIN_TASKS:
                raise ConfigError(f"data.train_tasks: unknown task {t!r}")
        if not self.tasks:
            raise ConfigError("tasks: need at least one task")
        if self.episodes < 1 or self.seeds < 1 or self.probe_episodes < 1:
            raise ConfigError("episodes, seeds and probe_episodes must be >= 1")
        if 0.0 not in self.r_grid or 1.0 not in self.r_grid:
            raise ConfigError("r_grid must contain 0 and 1 so both baselines are reported")
        if any(not (0.0 <= r <= 1.0) for r in self.r_grid + [self.ablation_r]):
            raise ConfigError("noise levels must lie in [0, 1]")
        if self.data.episodes < 0:
            raise ConfigError("data.episodes must be >= 0")
        if not (1 <= self.refine.open_loop_horizon <= self.policy.horizon):
            raise ConfigError("refine.open_loop_horizon must lie in [1, policy.horizon]")
        try:
            self.gap.gap()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"gap: {exc}") from None
        return self

    def policy_config(self) -> pl.PolicyConfig:
        p = self.policy
        return pl.PolicyConfig(obs_dim=simenv.obs_dim(), horizon=p.horizon, n_obs=p.n_obs,
                               inference_steps=p.inference_steps, hidden=tuple(p.hidden),
                               embed_dim=p.embed_dim, lr=p.lr, batch_size=p.batch_size,
                               train_iters=p.iters, min_snr_gamma=p.min_snr_gamma,
                               object_offsets=p.object_offsets)

    def refine_config(self, r: float) -> refine.RefineConfig:
        return refine.RefineConfig(r=float(r), open_loop_horizon=self.refine.open_loop_horizon,
                                   horizon=self.policy.horizon, budget=self.refine.budget)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section_hash(self, *names) -> str:
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _key_lines(node, prefix="") -> dict:
    """Map dotted key paths to 1-based source lines."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}{k.value}"
            out[path] = k.start_mark.line + 1
            out.update(_key_lines(v, path + "."))
    return out


def _fill(cls, data, path, lines):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        full = f"{path}{key}"
        where = f" (line {lines[full]})" if full in lines else ""
        if key not in known:
            raise ConfigError(f"unknown key {full!r}{where}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _fill(type(default), value, full + ".", lines)
            continue
        kwargs[key] = _coerce(value, default, full + where)
    return cls(**kwargs)


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


def load_config(path=None, text: str | None = None) -> BenchmarkConfig:
    """Parse a YAML config; unknown keys and type mismatches are errors."""
    if text is None:
        if path is None:
            return BenchmarkConfig().validate()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    lines = _key_lines(node) if node is not None else {}
    return _fill(BenchmarkConfig, data, "", lines).validate()


def dump_config(cfg: BenchmarkConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# -- seeds ------------------------------------------------------------------------

def derive_seed(*parts: int) -> int:
    """64-bit seed from integer parts via NumPy's SeedSequence hashing."""
    words = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


def r_code(r: float) -> int:
    return int(round(r * 10000))


# -- dataset file -----------------------------------------------------------------

def save_dataset(ds: pl.Dataset, path) -> None:
    """``DMDD``, u32 version, u64 records, u32 obs dim, u32 action dim,
    u32 chunk length, u32 history length, then per record the observation
    window followed by the action chunk, as little-endian float64."""
    n, n_obs, obs_dim = ds.obs.shape
    _, horizon, action_dim = ds.actions.shape
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<IQIIII", DATASET_VERSION, n, obs_dim, action_dim, horizon, n_obs))
    rec = np.concatenate([ds.obs.reshape(n, n_obs * obs_dim), ds.actions.reshape(n, horizon * action_dim)],
                         axis=1)
    buf.write(np.ascontiguousarray(rec, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path, config: pl.PolicyConfig) -> pl.Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ArtifactMismatch(f"{path}: not a robot dataset (bad magic)")
    version, n, obs_dim, action_dim, horizon, n_obs = struct.unpack_from("<IQIIII", raw, 4)
    if version != DATASET_VERSION:
        raise ArtifactMismatch(f"{path}: unsupported dataset version {version}")
    if (obs_dim, action_dim, horizon, n_obs) != (config.obs_dim, config.action_dim,
                                                 config.horizon, config.n_obs):
        raise ArtifactMismatch(f"{path}: dataset layout does not match the policy config")
    if n == 0:
        raise pl.PolicyError(f"{path}: empty dataset, nothing to train on")
    width = n_obs * obs_dim + horizon * action_dim
    rec = np.frombuffer(raw, dtype="<f8", offset=32)
    if rec.size != n * width:
        raise ArtifactMismatch(f"{path}: truncated dataset")
    rec = rec.reshape(n, width).astype(np.float64)
    obs = rec[:, :n_obs * obs_dim].reshape(n, n_obs, obs_dim)
    actions = rec[:, n_obs * obs_dim:].reshape(n, horizon, action_dim)
    return pl.Dataset(obs, actions, pl.dataset_stats(obs, actions, config))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- pipeline stages --------------------------------------------------------------

def gen_data(cfg: BenchmarkConfig, out: Path) -> Path:
    tasks = [benchmark.TRAIN_TASKS[t] for t in cfg.data.train_tasks]
    if cfg.data.episodes == 0:
        raise pl.PolicyError("data.episodes is 0: refusing to write an empty dataset")
    episodes = dm.generate_expert_dataset(tasks, cfg.data.episodes, derive_seed(cfg.seed, STREAM_DATA))
    ds = pl.build_dataset(episodes, cfg.policy_config())
    path = out / cfg.paths.data
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    log.info("wrote %d windows from %d episodes to %s", len(ds), len(episodes), path)
    return path


def train(cfg: BenchmarkConfig, out: Path, progress=None) -> Path:
    pcfg = cfg.policy_config()
    data_path = out / cfg.paths.data
    if not data_path.exists():
        raise FileNotFoundError(f"dataset {data_path} not found; run gen-data first")
    ds = load_dataset(data_path, pcfg)
    policy = pl.train_policy(ds, pcfg, derive_seed(cfg.seed, STREAM_TRAIN), progress=progress)
    path = out / cfg.paths.checkpoint
    path.parent.mkdir(parents=True, exist_ok=True)
    pl.save_policy(policy, path, extra={"dataset_sha256": file_sha256(data_path),
                                        "config_hash": cfg.section_hash("seed", "data", "policy")})
    return path


@dataclass
class EpisodeSpec:
    task: str
    seed_index: int
    episode: int
    scene_seed: int


def episode_specs(cfg: BenchmarkConfig, task: str) -> list[EpisodeSpec]:
    """Scene seeds for every evaluation episode of ``task``.

    A scene whose scripted demonstration fails is replaced by the next
    attempt; the replacement is itself derived from the root seed.
    """
    spec = benchmark.EVAL_TASKS[task]
    out = []
    for k in range(cfg.seeds):
        for e in range(cfg.episodes):
            for attempt in range(50):
                s = derive_seed(cfg.seed, STREAM_SCENE, spec.task_id, k, e, attempt)
                if dm.run_expert(spec, simenv.reset(spec, s), s).success:
                    break
            else:
                raise dm.ExpertFailure(f"no demonstrable scene for {task} seed {k} episode {e}")
            out.append(EpisodeSpec(task, k, e, s))
    return out


def demo_path(out: Path, cfg: BenchmarkConfig, ep: EpisodeSpec) -> Path:
    return out / cfg.paths.demos / ep.task / f"s{ep.seed_index}_e{ep.episode:03d}.jsonl"


def make_demos(cfg: BenchmarkConfig, out: Path) -> Path:
    gap = cfg.gap.gap()
    manifest = {"gap": dataclasses.asdict(gap), "seed": cfg.seed, "episodes": {}}
    for task in cfg.tasks:
        spec = benchmark.EVAL_TASKS[task]
        for ep in episode_specs(cfg, task):
            demo = dm.scripted_human_demo(spec, gap, ep.scene_seed)
            p = demo_path(out, cfg, ep)
            p.parent.mkdir(parents=True, exist_ok=True)
            dm.save_demo(demo, p)
            manifest["episodes"][str(p.relative_to(out / cfg.paths.demos))] = ep.scene_seed
    mpath = out / cfg.paths.demos / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return mpath


def check_artifacts(cfg: BenchmarkConfig, out: Path, need_policy: bool = True):
    """Load the policy and demo manifest, refusing mismatched artifacts."""
    policy = None
    if need_policy:
        ck = out / cfg.paths.checkpoint
        if not ck.exists():
            raise FileNotFoundError(f"checkpoint {ck} not found; run train first")
        try:
            policy = pl.load_policy(ck)
        except (pl.PolicyError, NetError, KeyError, json.JSONDecodeError) as exc:
            raise ArtifactMismatch(f"{ck}: unreadable checkpoint ({exc})") from None
        extra = policy.extra
        data_path = out / cfg.paths.data
        if data_path.exists() and extra.get("dataset_sha256") != file_sha256(data_path):
            raise ArtifactMismatch(f"{ck} was trained on a different dataset than {data_path}")
        if extra.get("config_hash") != cfg.section_hash("seed", "data", "policy"):
            raise ArtifactMismatch(f"{ck} was trained under a different seed/data/policy config")
    mpath = out / cfg.paths.demos / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"demo manifest {mpath} not found; run demo first")
    manifest = json.loads(mpath.read_text())
    gap = json.loads(json.dumps(dataclasses.asdict(cfg.gap.gap())))
    if manifest.get("seed") != cfg.seed or manifest.get("gap") != gap:
        raise ArtifactMismatch("demos were generated under a different seed or embodiment gap")
    return policy, manifest


# -- evaluation cells -------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    task: str
    r: float
    seed_index: int
    variant: str = "plain"  # plain | noise | thumb_index


def method_name(r: float, variant: str = "plain") -> str:
    base = "retarget" if r == 0.0 else "base_policy" if r == 1.0 else "demodiffusion"
    return base if variant == "plain" else f"{base}+{variant}"


_WORKER: dict = {}


def _worker_init(cfg_dict, out, policy_path):
    _WORKER.clear()
    _WORKER["cfg"] = _fill(BenchmarkConfig, cfg_dict, "", {})
    _WORKER["out"] = Path(out)
    _WORKER["policy"] = pl.load_policy(policy_path) if policy_path else None


def _run_cell_worker(cell: Cell):
    return run_cell(_WORKER["cfg"], _WORKER["out"], _WORKER["policy"], cell)


def run_cell(cfg: BenchmarkConfig, out: Path, policy, cell: Cell) -> tuple[int, int]:
    """Run all episodes of one (task, r, seed index, variant) cell; return (episodes, successes)."""
    spec = benchmark.EVAL_TASKS[cell.task]
    eps = [e for e in episode_specs_cached(cfg, cell.task) if e.seed_index == cell.seed_index]
    rcfg = RetargetCfgs.get(cell.variant)
    trajs, scenes, seeds = [], [], []
    for ep in eps:
        demo = dm.load_demo(demo_path(out, cfg, ep))
        if cell.variant == "noise":
            demo = dm.perturb_keypoints(demo, cfg.keypoint_noise,
                                        derive_seed(cfg.seed, STREAM_KEYPOINTS, spec.task_id,
                                                    ep.seed_index, ep.episode))
        trajs.append(rt.retarget_trajectory(demo, rcfg))
        scenes.append(refine.episode_scene(spec, ep.scene_seed, cfg.perturbation))
        seeds.append(derive_seed(cfg.seed, STREAM_NOISE, spec.task_id, r_code(cell.r),
                                 ep.seed_index, ep.episode))
    results = refine.run_episodes(spec, policy, trajs, scenes, seeds, cfg.refine_config(cell.r))
    return len(results), sum(bool(x.success) for x in results)


class RetargetCfgs:
    _table = {"plain": rt.RetargetConfig(), "noise": rt.RetargetConfig(),
              "thumb_index": rt.RetargetConfig(finger_mode="thumb_index")}

    @classmethod
    def get(cls, variant: str) -> rt.RetargetConfig:
        return cls._table[variant]


_SPEC_CACHE: dict = {}


def episode_specs_cached(cfg: BenchmarkConfig, task: str) -> list[EpisodeSpec]:
    key = (cfg.seed, cfg.seeds, cfg.episodes, task)
    if key not in _SPEC_CACHE:
        _SPEC_CACHE[key] = episode_specs(cfg, task)
    return _SPEC_CACHE[key]


def run_cells(cfg: BenchmarkConfig, out: Path, policy, cells: list[Cell], jobs: int = 1,
              policy_path: Path | None = None) -> dict:
    """Evaluate cells, in a process pool when ``jobs > 1``; returns {cell: (n, k)}."""
    if jobs <= 1:
        return {c: run_cell(cfg, out, policy, c) for c in cells}
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init,
                             initargs=(cfg.to_dict(), str(out),
                                       str(policy_path) if policy_path else None)) as pool:
        return dict(zip(cells, pool.map(_run_cell_worker, cells)))


# -- reporting --------------------------------------------------------------------

def fmt_r(r: float) -> str:
    return f"{r:.2f}"


def rows_for(cfg: BenchmarkConfig, results: dict, method_of=None) -> list[list[str]]:
    """Per-seed rows followed by one aggregate row per (task, r, variant)."""
    method_of = method_of or (lambda c: method_name(c.r, c.variant))
    groups: dict = {}
    for cell in sorted(results, key=lambda c: (c.task, c.variant, c.r, c.seed_index)):
        groups.setdefault((cell.task, cell.variant, cell.r), []).append(cell)
    rows = []
    for (task, variant, r), cells in groups.items():
        rates = []
        for c in cells:
            n, k = results[c]
            rates.append(k / n)
            rows.append([task, method_of(c), fmt_r(r), str(c.seed_index), str(n), str(k), f"{k / n:.4f}"])
        n_tot = sum(results[c][0] for c in cells)
        k_tot = sum(results[c][1] for c in cells)
        rows.append([task, method_of(cells[0]), fmt_r(r), "-1", str(n_tot), str(k_tot),
                     f"{k_tot / n_tot:.4f}", f"{np.mean(rates):.4f}", f"{np.std(rates):.4f}"])
    return rows


def write_csv(path: Path, rows: list[list[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def read_aggregates(path: Path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != CSV_HEADER:
            raise ArtifactMismatch(f"{path}: unexpected CSV header {header}")
        for row in rd:
            if row[3] == "-1":
                out.append({"task": row[0], "method": row[1], "r": float(row[2]),
                            "mean": float(row[7]), "std": float(row[8])})
    return out


def probe_base_rate(cfg: BenchmarkConfig, policy, task: str) -> float:
    """Base-policy success over ``probe_episodes`` fresh scenes (no demo files needed)."""
    spec = benchmark.EVAL_TASKS[task]
    gap = cfg.gap.gap()
    trajs, scenes, seeds = [], [], []
    for e in range(cfg.probe_episodes):
        for attempt in range(50):
            s = derive_seed(cfg.seed, STREAM_PROBE, spec.task_id, e, attempt)
            try:
                demo = dm.scripted_human_demo(spec, gap, s)
                break
            except dm.ExpertFailure:
                continue
        else:
            raise dm.ExpertFailure(f"no demonstrable probe scene for {task}")
        trajs.append(rt.retarget_trajectory(demo))
        scenes.append(refine.episode_scene(spec, s, cfg.perturbation))
        seeds.append(derive_seed(cfg.seed, STREAM_PROBE, STREAM_NOISE, spec.task_id, e))
    res = refine.run_episodes(spec, policy, trajs, scenes, seeds, cfg.refine_config(1.0))
    return sum(x.success for x in res) / len(res)


def evaluate(cfg: BenchmarkConfig, out: Path, r, jobs: int = 1) -> list[list[str]]:
    policy, _ = check_artifacts(cfg, out, need_policy=(r == "auto" or float(r) > 0.0))
    cells = []
    for task in cfg.tasks:
        rr = refine.choose_noise_level(probe_base_rate(cfg, policy, task)) if r == "auto" else float(r)
        cells += [Cell(task, rr, k) for k in range(cfg.seeds)]
    return rows_for(cfg, run_cells(cfg, out, policy, cells, jobs, out / cfg.paths.checkpoint))


def sweep(cfg: BenchmarkConfig, out: Path, jobs: int = 1) -> list[list[str]]:
    policy, _ = check_artifacts(cfg, out)
    cells = [Cell(t, float(r), k) for t in cfg.tasks for r in cfg.r_grid for k in range(cfg.seeds)]
    return rows_for(cfg, run_cells(cfg, out, policy, cells, jobs, out / cfg.paths.checkpoint))


def ablate(cfg: BenchmarkConfig, out: Path, jobs: int = 1) -> list[list[str]]:
    policy, _ = check_artifacts(cfg, out)
    cells = [Cell(t, r, k, v) for t in cfg.tasks for v in ("noise", "thumb_index")
             for r in (0.0, cfg.ablation_r) for k in range(cfg.seeds)]
    return rows_for(cfg, run_cells(cfg, out, policy, cells, jobs, out / cfg.paths.checkpoint))


def plot_data(csv_path: Path) -> list[list[str]]:
    """``task,r,mean,std`` triples from a sweep CSV's aggregate rows."""
    rows = [[a["task"], fmt_r(a["r"]), f"{a['mean']:.4f}", f"{a['std']:.4f}"]
            for a in read_aggregates(csv_path)]
    return rows


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
