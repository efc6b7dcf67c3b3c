"""Chunked-action diffusion policy trained by epsilon prediction.

The denoiser is a :class:`~demorefine.tinynet.Mlp` that maps
``[noisy chunk | observation history | step embedding]`` to the predicted
noise. Everything the network sees is normalized with statistics frozen at
training time; chunks are noised and denoised in that normalized space.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath, simenv, tinynet
from .diffmath import NoiseSchedule
from .tinynet import AdamState, Mlp

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6


class PolicyError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PolicyConfig:
    obs_dim: int
    action_dim: int = 4
    horizon: int = 10
    n_obs: int = 2
    num_train_steps: int = 1000
    inference_steps: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: tuple = (256, 256, 256)
    embed_dim: int = 32
    lr: float = 2e-3
    lr_final_fraction: float = 0.05
    batch_size: int = 256
    train_iters: int = 20000
    # clamp for the clean-chunk estimate during sampling, in normalized units
    clip_sample: float | None = 4.0
    # per-step loss weight min(SNR, gamma) / SNR; None weights every step equally
    min_snr_gamma: float | None = 1.0
    # append object-minus-effector offsets (simulator observation layout only)
    object_offsets: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.horizon < 1 or self.n_obs < 1:
            raise PolicyError("horizon and n_obs must be >= 1")
        if not (1 <= self.inference_steps <= self.num_train_steps):
            raise PolicyError("need 1 <= inference_steps <= num_train_steps")
        if self.embed_dim % 2:
            raise PolicyError("embed_dim must be even")

    @property
    def chunk_size(self) -> int:
        return self.horizon * self.action_dim

    @property
    def feature_dim(self) -> int:
        return self.obs_dim + (3 * simenv.num_objects(self.obs_dim) if self.object_offsets else 0)

    @property
    def cond_size(self) -> int:
        return self.n_obs * self.feature_dim

    @property
    def net_widths(self) -> list[int]:
        return [self.chunk_size + self.cond_size + self.embed_dim, *self.hidden, self.chunk_size]


@dataclass
class NormStats:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass
class Dataset:
    obs: np.ndarray  # (N, n_obs, obs_dim), raw
    actions: np.ndarray  # (N, horizon, action_dim), raw
    stats: NormStats

    def __len__(self) -> int:
        return len(self.obs)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.obs, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.actions, dtype="<f8").tobytes())
        return h.hexdigest()


def _episode_arrays(ep):
    if hasattr(ep, "observations"):
        return ep.observations(), ep.action_array()
    obs, act = ep
    return np.asarray(obs, dtype=np.float64), np.asarray(act, dtype=np.float64)


def build_dataset(episodes, config: PolicyConfig) -> Dataset:
    """Stride-1 windows: obs ``o_{t-n+1..t}`` (start-padded) and actions
    ``a_{t..t+H-1}`` (end-padded with the final action)."""
    episodes = list(episodes)
    if not episodes:
        raise PolicyError("cannot build a dataset from zero episodes")
    obs_w, act_w = [], []
    for ep in episodes:
        obs, act = _episode_arrays(ep)
        if obs.ndim != 2 or obs.shape[1] != config.obs_dim or act.shape != (len(obs), config.action_dim):
            raise PolicyError(f"episode arrays {obs.shape} / {act.shape} do not match config")
        T = len(obs)
        t = np.arange(T)
        oi = np.clip(t[:, None] + np.arange(-config.n_obs + 1, 1)[None, :], 0, T - 1)
        ai = np.clip(t[:, None] + np.arange(config.horizon)[None, :], 0, T - 1)
        obs_w.append(obs[oi])
        act_w.append(act[ai])
    obs_all = np.concatenate(obs_w)
    act_all = np.concatenate(act_w)
    return Dataset(obs_all, act_all, dataset_stats(obs_all, act_all, config))


def encode_obs(obs, config: PolicyConfig) -> np.ndarray:
    """Raw observations ``(..., obs_dim)`` to policy features ``(..., feature_dim)``."""
    obs = np.asarray(obs, dtype=np.float64)
    if not config.object_offsets:
        return obs
    return np.concatenate([obs, simenv.object_offsets(obs)], axis=-1)


def dataset_stats(obs, actions, config: PolicyConfig) -> NormStats:
    """Per-dimension mean and floored std of encoded observations and actions."""
    flat_obs = encode_obs(obs, config).reshape(-1, config.feature_dim)
    flat_act = np.asarray(actions).reshape(-1, config.action_dim)
    return NormStats(flat_obs.mean(axis=0), np.maximum(flat_obs.std(axis=0), STD_FLOOR),
                     flat_act.mean(axis=0), np.maximum(flat_act.std(axis=0), STD_FLOOR))


@dataclass
class Policy:
    net: Mlp
    schedule: NoiseSchedule
    config: PolicyConfig
    stats: NormStats
    dataset_fingerprint: str = ""
    extra: dict = field(default_factory=dict, compare=False)
    num_evals: int = field(default=0, compare=False)

    def normalize_actions(self, a):
        return (np.asarray(a, dtype=np.float64) - self.stats.act_mean) / self.stats.act_std

    def denormalize_actions(self, a):
        return np.asarray(a, dtype=np.float64) * self.stats.act_std + self.stats.act_mean

    def normalize_obs(self, o):
        """Encode raw observations and standardize them."""
        return (encode_obs(o, self.config) - self.stats.obs_mean) / self.stats.obs_std

    def cond(self, obs_history) -> np.ndarray:
        """Normalized, flattened conditioning for ``(n_obs, obs_dim)`` or a batch of them."""
        o = np.asarray(obs_history, dtype=np.float64)
        batched = o.ndim == 3
        if not batched:
            o = o[None]
        if o.shape[1:] != (self.config.n_obs, self.config.obs_dim):
            raise PolicyError(f"obs history shape {o.shape[1:]} != "
                              f"({self.config.n_obs}, {self.config.obs_dim})")
        return self.normalize_obs(o).reshape(len(o), -1)

    def predict_eps(self, x, cond, s) -> np.ndarray:
        """One batched denoiser evaluation at step ``s``."""
        emb = tinynet.timestep_embedding(s, self.config.embed_dim, self.config.num_train_steps)
        emb = np.broadcast_to(emb, (len(x), self.config.embed_dim))
        self.num_evals += 1
        y, _ = tinynet.mlp_forward(self.net, np.concatenate([x, cond, emb], axis=1))
        return y


def _lr_at(config: PolicyConfig, it: int, total: int) -> float:
    frac = config.lr_final_fraction
    return config.lr * (frac + (1.0 - frac) * 0.5 * (1.0 + math.cos(math.pi * it / max(total, 1))))


def train_policy(dataset: Dataset, config: PolicyConfig, seed: int,
                 iters: int | None = None, progress=None) -> Policy:
    """Epsilon-prediction behaviour cloning with Adam and cosine LR decay.

    Returns the policy; its ``loss_history`` attribute holds the per-iteration loss.
    """
    if len(dataset) == 0:
        raise PolicyError("empty dataset")
    iters = config.train_iters if iters is None else iters
    rng = np.random.default_rng(seed)
    schedule = diffmath.make_linear_schedule(config.num_train_steps, config.beta_start, config.beta_end)
    net = Mlp.init(config.net_widths, seed=int(rng.integers(2**63)))
    opt = AdamState.for_net(net, lr=config.lr)
    stats = dataset.stats
    x0_all = ((dataset.actions - stats.act_mean) / stats.act_std).reshape(len(dataset), -1)
    cond_all = (encode_obs(dataset.obs, config) - stats.obs_mean) / stats.obs_std
    cond_all = cond_all.reshape(len(dataset), -1)
    sqrt_ab = np.sqrt(schedule.alpha_bars)
    sqrt_1m_ab = np.sqrt(1.0 - schedule.alpha_bars)
    emb_table = tinynet.timestep_embedding(np.arange(config.num_train_steps + 1), config.embed_dim,
                                           config.num_train_steps)
    snr = schedule.alpha_bars / np.maximum(1.0 - schedule.alpha_bars, 1e-300)
    if config.min_snr_gamma is None:
        weights = np.ones_like(snr)
    else:
        weights = np.minimum(snr, config.min_snr_gamma) / snr
    losses = np.empty(iters)
    B = min(config.batch_size, len(dataset))
    for it in range(iters):
        idx = rng.integers(len(dataset), size=B)
        s = rng.integers(1, config.num_train_steps + 1, size=B)
        eps = rng.standard_normal((B, config.chunk_size))
        x_s = sqrt_ab[s, None] * x0_all[idx] + sqrt_1m_ab[s, None] * eps
        inp = np.concatenate([x_s, cond_all[idx], emb_table[s]], axis=1)
        pred, cache = tinynet.mlp_forward(net, inp)
        err = pred - eps
        werr = weights[s, None] * err
        with np.errstate(over="ignore", invalid="ignore"):
            loss = float(np.mean(werr * err))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        losses[it] = loss
        grads = tinynet.mlp_backward(net, cache, (2.0 / err.size) * werr)
        tinynet.adam_step(net, grads, opt, lr=_lr_at(config, it, iters))
        if progress is not None and (it + 1) % 1000 == 0:
            progress(it + 1, float(losses[max(0, it - 99):it + 1].mean()))
    policy = Policy(net, schedule, config, stats, dataset.fingerprint())
    policy.loss_history = losses
    return policy


def denoise(policy: Policy, x, cond, start: int, budget: int | None = None) -> np.ndarray:
    """Run the strided DDIM plan from ``start`` to 0 on normalized chunks ``x``.

    ``budget`` overrides the configured number of inference steps for a full chain.
    """
    cfg = policy.config
    n_inf = cfg.inference_steps if budget is None else budget
    plan = diffmath.make_stride_plan(cfg.num_train_steps, n_inf, start)
    for s_from, s_to in diffmath.plan_pairs(plan):
        eps = policy.predict_eps(x, cond, s_from)
        x = diffmath.ddim_reverse_step(eps, x, s_from, s_to, policy.schedule, cfg.clip_sample)
    return x


def standard_normal_rows(seeds, size: int) -> np.ndarray:
    return np.stack([np.random.default_rng(s).standard_normal(size) for s in seeds])


def sample_chunks(policy: Policy, obs_histories, seeds, start: int | None = None, init=None,
                  budget: int | None = None):
    """Batched :func:`sample_chunk`; row ``i`` uses ``seeds[i]``."""
    cfg = policy.config
    S = cfg.num_train_steps
    start = S if start is None else start
    if not (0 < start <= S):
        raise PolicyError(f"start step {start} outside (0, {S}]")
    cond = policy.cond(obs_histories)
    if init is None:
        if start < S:
            raise PolicyError("a partial start needs an init chunk")
        x = standard_normal_rows(seeds, cfg.chunk_size)
    else:
        x = np.asarray(init, dtype=np.float64).reshape(len(cond), cfg.chunk_size)
    x0 = denoise(policy, x, cond, start, budget)
    return policy.denormalize_actions(x0.reshape(len(cond), cfg.horizon, cfg.action_dim))


def sample_chunk(policy: Policy, obs_history, seed, start: int | None = None, init=None) -> np.ndarray:
    """Sample one ``(H, action_dim)`` chunk.

    With ``start == S`` and no ``init`` this draws from the base policy; with
    ``start < S`` ``init`` must be the normalized chunk already noised to ``start``.
    """
    init_b = None if init is None else np.asarray(init, dtype=np.float64)[None]
    return sample_chunks(policy, np.asarray(obs_history)[None], [seed], start, init_b)[0]


# -- flow-matching variant ------------------------------------------------------

FLOW_TIME_SCALE = 1000.0


@dataclass
class FlowPolicy:
    """Velocity-field policy; time runs from noise (0) to data (1)."""

    net: Mlp
    config: PolicyConfig
    stats: NormStats
    num_evals: int = field(default=0, compare=False)

    normalize_actions = Policy.normalize_actions
    denormalize_actions = Policy.denormalize_actions
    normalize_obs = Policy.normalize_obs
    cond = Policy.cond

    def predict_velocity(self, x, cond, t: float) -> np.ndarray:
        emb = tinynet.timestep_embedding(t * FLOW_TIME_SCALE, self.config.embed_dim, FLOW_TIME_SCALE)
        emb = np.broadcast_to(emb, (len(x), self.config.embed_dim))
        self.num_evals += 1
        y, _ = tinynet.mlp_forward(self.net, np.concatenate([x, cond, emb], axis=1))
        return y


def train_flow_policy(dataset: Dataset, config: PolicyConfig, seed: int,
                      iters: int | None = None) -> FlowPolicy:
    """Rectified-flow objective: regress ``a - eps`` at ``t a + (1 - t) eps``."""
    if len(dataset) == 0:
        raise PolicyError("empty dataset")
    iters = config.train_iters if iters is None else iters
    rng = np.random.default_rng(seed)
    net = Mlp.init(config.net_widths, seed=int(rng.integers(2**63)))
    opt = AdamState.for_net(net, lr=config.lr)
    stats = dataset.stats
    x1_all = ((dataset.actions - stats.act_mean) / stats.act_std).reshape(len(dataset), -1)
    cond_all = (encode_obs(dataset.obs, config) - stats.obs_mean) / stats.obs_std
    cond_all = cond_all.reshape(len(dataset), -1)
    B = min(config.batch_size, len(dataset))
    losses = np.empty(iters)
    for it in range(iters):
        idx = rng.integers(len(dataset), size=B)
        t = rng.uniform(size=B)
        eps = rng.standard_normal((B, config.chunk_size))
        x1 = x1_all[idx]
        xt = t[:, None] * x1 + (1.0 - t[:, None]) * eps
        emb = tinynet.timestep_embedding(t * FLOW_TIME_SCALE, config.embed_dim, FLOW_TIME_SCALE)
        pred, cache = tinynet.mlp_forward(net, np.concatenate([xt, cond_all[idx], emb], axis=1))
        err = pred - (x1 - eps)
        loss = float(np.mean(err * err))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        losses[it] = loss
        grads = tinynet.mlp_backward(net, cache, (2.0 / err.size) * err)
        tinynet.adam_step(net, grads, opt, lr=_lr_at(config, it, iters))
    fp = FlowPolicy(net, config, stats)
    fp.loss_history = losses
    return fp


def flow_refine_chunks(policy: FlowPolicy, obs_histories, inits, t_start: float, seeds,
                       budget: int = 20) -> np.ndarray:
    """Batched :func:`flow_refine_chunk`; row ``i`` draws its noise from ``seeds[i]``."""
    if not (0.0 <= t_start <= 1.0):
        raise PolicyError(f"t_start must lie in [0, 1], got {t_start}")
    inits = np.asarray(inits, dtype=np.float64)
    if t_start == 0.0:
        return inits.copy()
    cfg = policy.config
    cond = policy.cond(obs_histories)
    noise = standard_normal_rows(seeds, cfg.chunk_size)
    tau = 1.0 - t_start
    x = tau * policy.normalize_actions(inits).reshape(len(cond), -1) + (1.0 - tau) * noise
    n = max(1, diffmath.round_half_up(budget * t_start))
    dt = t_start / n
    for k in range(n):
        x = x + dt * policy.predict_velocity(x, cond, tau + k * dt)
    return policy.denormalize_actions(x.reshape(len(cond), cfg.horizon, cfg.action_dim))


def flow_refine_chunk(policy: FlowPolicy, obs_history, init, t_start: float, seed,
                      budget: int = 20) -> np.ndarray:
    """Re-enter the flow at time ``1 - t_start`` and Euler-integrate to 1.

    ``init`` is a raw ``(H, action_dim)`` chunk; ``t_start = 1`` ignores it and
    samples from noise, ``t_start = 0`` returns it unchanged.
    """
    out = flow_refine_chunks(policy, np.asarray(obs_history)[None],
                             np.asarray(init, dtype=np.float64)[None], t_start, [seed], budget)
    return out[0]


# -- checkpoints ----------------------------------------------------------------

def save_policy(policy: Policy, path, extra: dict | None = None) -> None:
    """Write ``<path>`` (network) and ``<path>.json`` (sidecar).

    ``extra`` is stored verbatim in the sidecar and returned as ``policy.extra``.
    """
    path = Path(path)
    if extra is not None:
        policy.extra = dict(extra)
    tinynet.save_checkpoint(policy.net, path)
    sidecar = {
        "config": asdict(policy.config),
        "schedule": {"num_steps": policy.schedule.num_steps, "beta_start": policy.schedule.beta_start,
                     "beta_end": policy.schedule.beta_end},
        "stats": policy.stats.to_dict(),
        "dataset_fingerprint": policy.dataset_fingerprint,
        "network_sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
        "extra": policy.extra,
    }
    sidecar["config"]["hidden"] = list(policy.config.hidden)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_policy(path) -> Policy:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    raw = path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != sidecar["network_sha256"]:
        raise PolicyError(f"{path}: network file does not match its sidecar")
    net = tinynet.load_checkpoint(path)
    config = PolicyConfig(**sidecar["config"])
    sch = sidecar["schedule"]
    schedule = diffmath.make_linear_schedule(sch["num_steps"], sch["beta_start"], sch["beta_end"])
    if net.widths != config.net_widths:
        raise PolicyError(f"{path}: network widths {net.widths} disagree with config")
    return Policy(net, schedule, config, NormStats.from_dict(sidecar["stats"]),
                  sidecar["dataset_fingerprint"], sidecar.get("extra", {}))
