"""Round orchestration: DP momentum at the users, robust aggregation of sketches at the federator.

One round at global model ``w``:

1. every honest user samples a minibatch without replacement, clips and
   averages per-sample gradients, adds Gaussian noise, folds the result into
   its momentum and sends ``R m`` (``k`` floats);
2. malicious users send crafted vectors instead;
3. the federator aggregates the ``n`` sketches, decompresses with ``R^T``
   and steps ``w <- w - lr * u``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import accountant
from .aggregators import AggregatorSpec, aggregate
from .attacks import AttackSpec, craft, flip_labels
from .dp import DPConfig, privatize_batch
from .sketch import CountSketch, sketch_for_rate
from .tensor import Dataset, ModelSpec, init_params, loss_and_accuracy, make_rng, per_sample_gradients

log = logging.getLogger(__name__)

# stream ids handed to make_rng(seed, stream, ...)
PARTITION_STREAM, SKETCH_STREAM, USER_STREAM, INIT_STREAM = 0, 1, 2, 3


class TrainConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Raised when a round fails; ``partial`` holds everything completed so far."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class TrainConfig:
    model: ModelSpec
    n_users: int
    n_byzantine: int
    rounds: int
    batch_size: int
    aggregator: AggregatorSpec
    attack: AttackSpec = AttackSpec()
    # ((last_round_inclusive, lr), ..., (None, lr))
    lr_schedule: tuple = ((None, 0.25),)
    momentum: float = 0.9
    momentum_schedule: str = "constant"
    smoothness: float | None = None
    strong_convexity: float | None = None
    local_steps: int = 1
    local_lr: float = 0.1
    clip_norm: float = 2.0
    noise_multiplier: float = 0.0
    partition_concentration: float = 0.5
    num_groups: int = 10
    compression_rate: float = 10.0
    sketch_blocks: int = 10
    resample_sketch: bool = False
    attack_space: str = "compressed"
    eval_every: int = 50
    delta: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1:
            raise TrainConfigError("need at least one user")
        if not 0 <= 2 * self.n_byzantine < self.n_users:
            raise TrainConfigError(f"need 0 <= b < n/2 (n={self.n_users}, b={self.n_byzantine})")
        if self.rounds < 0:
            raise TrainConfigError("rounds must be non-negative")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be positive")
        if not 0 < self.partition_concentration <= 1:
            raise TrainConfigError("partition concentration must lie in (0, 1]")
        if self.local_steps < 1:
            raise TrainConfigError("local_steps must be >= 1")
        if self.local_steps > 1 and self.noise_multiplier > 0:
            raise TrainConfigError("local_steps > 1 is only supported with DP disabled (noise_multiplier = 0)")
        if self.noise_multiplier < 0:
            raise TrainConfigError("noise_multiplier must be non-negative")
        if self.momentum_schedule not in ("constant", "strongly_convex"):
            raise TrainConfigError(f"unknown momentum schedule {self.momentum_schedule!r}")
        if self.momentum_schedule == "strongly_convex" and not (self.smoothness and self.strong_convexity):
            raise TrainConfigError("strongly_convex momentum needs smoothness and strong_convexity")
        if not 0 <= self.momentum <= 1:
            raise TrainConfigError("momentum must lie in [0, 1]")
        if self.attack_space not in ("compressed", "original"):
            raise TrainConfigError("attack_space must be 'compressed' or 'original'")
        if self.eval_every < 1:
            raise TrainConfigError("eval_every must be >= 1")
        if not self.lr_schedule or self.lr_schedule[-1][0] is not None:
            raise TrainConfigError("lr schedule must end with an open-ended (None, lr) entry")

    @property
    def honest_ids(self) -> range:
        return range(self.n_users - self.n_byzantine)

    @property
    def byzantine_ids(self) -> range:
        return range(self.n_users - self.n_byzantine, self.n_users)

    def lr_at(self, t: int) -> float:
        for last, lr in self.lr_schedule:
            if last is None or t <= last:
                return float(lr)
        raise AssertionError("unreachable")

    def beta_at(self, t: int) -> float:
        if self.momentum_schedule == "constant":
            return self.momentum
        lip, mu = self.smoothness, self.strong_convexity
        gamma = 10.0 / (mu * (t + 240.0 * lip / mu))
        return min(1.0, max(0.0, 1.0 - 24.0 * lip * gamma))


# -- data placement ---------------------------------------------------------


def partition_noniid(labels, n: int, num_classes: int, a: float, rng: np.random.Generator, num_groups: int = 10):
    """Split example indices over ``n`` users with label skew.

    Users are shuffled into ``num_groups`` groups of near-equal size.  An
    example with label ``j`` lands in group ``j mod G`` with probability
    ``a`` and in each other group with probability ``(1 - a) / (G - 1)``;
    each group deals its examples evenly to its users.  Returns the shards
    and a list of warnings.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not 0 < a <= 1:
        raise ValueError("a must lie in (0, 1]")
    warnings = []
    groups = num_groups
    if n < groups:
        warnings.append(f"{n} users < {groups} groups; using {n} groups")
        groups = n
    user_groups = np.array_split(rng.permutation(n), groups)

    own = labels % groups
    if groups == 1:
        target = own
    else:
        other = rng.integers(groups - 1, size=labels.size)
        other = other + (other >= own)  # uniform over groups != own
        target = np.where(rng.random(labels.size) < a, own, other)

    shards = [None] * n
    for g, members in enumerate(user_groups):
        idx = rng.permutation(np.flatnonzero(target == g))
        for user, part in zip(members, np.array_split(idx, len(members))):
            shards[user] = np.sort(part)
    return shards, warnings


def sample_minibatch(shard_size: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform ``batch_size``-subset of ``range(shard_size)`` without replacement."""
    if batch_size > shard_size:
        raise ValueError(f"batch size {batch_size} exceeds shard size {shard_size}")
    return rng.choice(shard_size, size=batch_size, replace=False)


# -- users and federator ----------------------------------------------------


@dataclass
class UserState:
    data: Dataset
    momentum: np.ndarray
    rng: np.random.Generator
    dp: DPConfig


@dataclass
class UserMessage:
    gradient: np.ndarray
    momentum: np.ndarray
    compressed: np.ndarray


def _local_gradient(state: UserState, params, cfg: TrainConfig):
    spec = cfg.model
    if cfg.local_steps == 1:
        batch = state.data.subset(sample_minibatch(len(state.data), cfg.batch_size, state.rng))
        return privatize_batch(per_sample_gradients(spec, params, batch), state.dp, state.rng)
    # several plain SGD steps; reported as the accumulated gradient (w_0 - w_J) / local_lr
    local = params.copy()
    for _ in range(cfg.local_steps):
        batch = state.data.subset(sample_minibatch(len(state.data), cfg.batch_size, state.rng))
        local -= cfg.local_lr * per_sample_gradients(spec, local, batch).mean(axis=0)
    return (params - local) / cfg.local_lr


def user_round(state: UserState, params, cfg: TrainConfig, sketch: CountSketch, t: int) -> UserMessage:
    g = _local_gradient(state, params, cfg)
    beta = cfg.beta_at(max(t - 1, 0))
    state.momentum = beta * state.momentum + (1.0 - beta) * g
    return UserMessage(g, state.momentum.copy(), sketch.compress(state.momentum))


def federator_round(vectors, spec: AggregatorSpec, sketch: CountSketch):
    """Aggregate the sketches and decompress; returns ``(u, aggregate)``."""
    agg = aggregate(spec, vectors)
    return sketch.decompress(agg), agg


# -- training loop ----------------------------------------------------------


@dataclass
class RoundTranscript:
    t: int
    honest: np.ndarray  # (n - b, k)
    malicious: np.ndarray  # (b, k)
    aggregate: np.ndarray  # (k,)
    update: np.ndarray  # (d,)
    params: np.ndarray  # (d,) after the step
    lr: float
    metrics: dict | None = None
    gradients: np.ndarray | None = None  # (n, d) when vectors are kept
    momenta: np.ndarray | None = None

    @property
    def uplink_floats_per_user(self) -> int:
        sizes = {row.size for row in self.honest} | {row.size for row in self.malicious}
        if len(sizes) != 1:
            raise AssertionError(f"inconsistent uplink sizes {sizes}")
        return sizes.pop()


@dataclass
class TrainResult:
    config: TrainConfig
    params: np.ndarray
    transcripts: list = field(default_factory=list)
    ledger: accountant.RDPLedger | None = None
    sampling_rate: float = 0.0
    k: int = 0
    d: int = 0
    notes: list = field(default_factory=list)
    sketch: CountSketch | None = None  # the run-level sketch

    @property
    def metric_rows(self) -> list:
        return [tr.metrics for tr in self.transcripts if tr.metrics is not None]


def _round_sketch(cfg: TrainConfig, d: int, t: int, fixed: CountSketch) -> CountSketch:
    if not cfg.resample_sketch:
        return fixed
    seed = int(make_rng(cfg.seed, SKETCH_STREAM, t + 1).integers(2**63))
    return sketch_for_rate(d, cfg.compression_rate, cfg.sketch_blocks, seed)


def setup_users(cfg: TrainConfig, train_data: Dataset):
    shards, notes = partition_noniid(
        train_data.y,
        cfg.n_users,
        cfg.model.num_classes,
        cfg.partition_concentration,
        make_rng(cfg.seed, PARTITION_STREAM),
        cfg.num_groups,
    )
    users = []
    for i, shard in enumerate(shards):
        data = train_data.subset(shard)
        if i in cfg.byzantine_ids and cfg.attack.kind == "label_flip":
            data = flip_labels(data, cfg.model.num_classes)
        if len(data) < cfg.batch_size:
            raise TrainConfigError(f"user {i} holds {len(data)} examples, fewer than batch size {cfg.batch_size}")
        dp = DPConfig.from_noise_multiplier(cfg.clip_norm, cfg.noise_multiplier, cfg.batch_size, len(data))
        users.append(UserState(data, np.zeros(cfg.model.num_params), make_rng(cfg.seed, USER_STREAM, i), dp))
    return users, notes


def train(cfg: TrainConfig, train_data: Dataset, eval_data: Dataset | None = None, *, keep_vectors=False) -> TrainResult:
    """Run ``cfg.rounds`` rounds and return transcripts, final params and the privacy ledger."""
    spec = cfg.model
    d = spec.num_params
    users, notes = setup_users(cfg, train_data)
    honest_data = Dataset.concat(users[i].data for i in cfg.honest_ids)
    eval_data = honest_data if eval_data is None else eval_data

    sketch_seed = int(make_rng(cfg.seed, SKETCH_STREAM).integers(2**63))
    sketch = sketch_for_rate(d, cfg.compression_rate, cfg.sketch_blocks, sketch_seed)
    params = init_params(spec, make_rng(cfg.seed, INIT_STREAM))

    q = max(users[i].dp.sampling_rate for i in cfg.honest_ids)
    if cfg.noise_multiplier > 0 and cfg.local_steps == 1:
        per_round = accountant.subsampled_gaussian_curve(q, cfg.noise_multiplier)
    else:
        per_round = None  # no privacy claimed
    ledger = accountant.RDPLedger(per_round)
    result = TrainResult(cfg, params, [], ledger, q, sketch.k, d, notes, sketch)

    n_honest = len(cfg.honest_ids)
    for t in range(cfg.rounds):
        try:
            r = _round_sketch(cfg, d, t, sketch)
            msgs = [user_round(u, params, cfg, r, t) for u in users]
            honest = np.array([msgs[i].compressed for i in cfg.honest_ids]).reshape(n_honest, r.k)
            own = np.array([msgs[i].compressed for i in cfg.byzantine_ids]).reshape(-1, r.k)
            if cfg.attack_space == "compressed" or cfg.n_byzantine == 0:
                malicious = craft(cfg.attack, honest, own, cfg.n_users, cfg.n_byzantine)
            else:
                honest_m = np.array([msgs[i].momentum for i in cfg.honest_ids])
                own_m = np.array([msgs[i].momentum for i in cfg.byzantine_ids]).reshape(-1, d)
                malicious = r.compress(craft(cfg.attack, honest_m, own_m, cfg.n_users, cfg.n_byzantine))
            sent = np.vstack([honest, malicious])
            update, agg = federator_round(sent, cfg.aggregator, r)
            lr = cfg.lr_at(t)
            params = params - lr * update
            if not np.all(np.isfinite(params)):
                raise FloatingPointError(f"non-finite parameters after round {t}")
            ledger.step()
            tr = RoundTranscript(t, honest, malicious, agg, update, params, lr)
            if keep_vectors:
                tr.gradients = np.array([m.gradient for m in msgs])
                tr.momenta = np.array([m.momentum for m in msgs])
            if (t + 1) % cfg.eval_every == 0 or t == cfg.rounds - 1:
                train_loss, _ = loss_and_accuracy(spec, params, honest_data)
                _, acc = loss_and_accuracy(spec, params, eval_data)
                tr.metrics = {
                    "round": t,
                    "train_loss": train_loss,
                    "eval_accuracy": acc,
                    "uplink_floats_per_user": tr.uplink_floats_per_user,
                    "epsilon_dp": ledger.epsilon(cfg.delta),
                }
            result.transcripts.append(tr)
            result.params = params
        except Exception as exc:
            log.error("round %d failed: %s", t, exc)
            raise TrainingAborted(f"round {t} failed: {exc}", result) from exc
    return result
