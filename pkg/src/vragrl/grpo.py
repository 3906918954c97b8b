"""Group-relative policy optimisation objective.

Rewards of a group of trajectories sampled for the same task are turned into
advantages by centring on the group mean and scaling by the group's
population standard deviation. The loss is the negated clipped surrogate,
averaged over policy-generated tokens of each trajectory and then over the
group, plus a KL penalty towards a frozen reference policy.

Two gradient paths exist. For any policy, :func:`grpo_loss` returns
``dloss/dlogp`` per token, which is what a model framework would
back-propagate. For :class:`ToyPolicy` it also returns the exact gradient
with respect to the parameter matrix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .trajectory import Role


class GroupTooSmall(ValueError):
    pass


class EmptyMask(ValueError):
    pass


class MaskViolation(ValueError):
    """A non-assistant token was marked as policy-generated."""


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 5
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.01
    learning_rate: float = 1e-6
    advantage_std_floor: float = 1e-6

    def __post_init__(self):
        if self.group_size < 2:
            raise GroupTooSmall("group_size must be >= 2")
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.advantage_std_floor <= 0:
            raise ValueError("advantage_std_floor must be positive")


def compute_advantages(rewards: Sequence[float], config: GrpoConfig = GrpoConfig()) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {r.size}")
    centred = r - r.mean()
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return centred / max(float(r.std()), config.advantage_std_floor)


@dataclass
class TokenizedTrajectory:
    """Per-token view of one trajectory.

    ``mask`` is 1 exactly on policy-generated tokens. ``states`` are the toy
    policy's context ids (-1 on observation tokens) and may be None for other
    policies, in which case ``logp`` must hold the current log-probs.
    """

    token_ids: np.ndarray
    mask: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    logp: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None
    roles: Optional[list] = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.logp_old = np.asarray(self.logp_old, dtype=np.float64)
        self.logp_ref = np.asarray(self.logp_ref, dtype=np.float64)
        if self.logp is not None:
            self.logp = np.asarray(self.logp, dtype=np.float64)
        if self.states is not None:
            self.states = np.asarray(self.states, dtype=np.int64)
        n = len(self.token_ids)
        for name in ("mask", "logp_old", "logp_ref", "logp", "states"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} has length {len(arr)}, expected {n}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be 0/1")
        if self.roles is not None:
            expected = np.array([Role(r) is Role.ASSISTANT for r in self.roles], dtype=np.float64)
            if not np.array_equal(expected, self.mask):
                raise MaskViolation("mask must be 1 on assistant tokens and 0 elsewhere")

    @property
    def n_policy_tokens(self) -> int:
        return int(self.mask.sum())


@dataclass
class GrpoGroup:
    trajectories: list[TokenizedTrajectory]
    rewards: np.ndarray
    advantages: np.ndarray = None

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if len(self.rewards) != len(self.trajectories):
            raise ValueError("one reward per trajectory")

    @classmethod
    def build(cls, trajectories, rewards, config: GrpoConfig = GrpoConfig()) -> "GrpoGroup":
        return cls(list(trajectories), rewards, compute_advantages(rewards, config))


@dataclass
class LossResult:
    loss: float
    grad: Optional[np.ndarray]
    logp_grads: list[np.ndarray]
    kl: float
    clip_fraction: float


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class ToyPolicy:
    """Softmax over a small action vocabulary, one logit row per discrete state."""

    def __init__(self, params: np.ndarray):
        self.params = np.array(params, dtype=np.float64)
        if self.params.ndim != 2:
            raise ValueError("params must be a (states, actions) matrix")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "ToyPolicy":
        return cls(np.zeros((n_states, n_actions)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.params.shape

    def log_probs(self, params: Optional[np.ndarray] = None) -> np.ndarray:
        return _log_softmax(self.params if params is None else params)

    def probs(self, state: int) -> np.ndarray:
        return np.exp(self.log_probs()[state])

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.params.copy())


def grpo_loss(
    group: GrpoGroup,
    config: GrpoConfig = GrpoConfig(),
    policy: Optional[ToyPolicy] = None,
    ref_policy: Optional[ToyPolicy] = None,
) -> LossResult:
    """Negated clipped-surrogate objective with KL penalty.

    With a toy ``policy`` the current log-probs come from its parameters and
    the KL term is the exact categorical KL to ``ref_policy`` at each visited
    state. Otherwise each trajectory's ``logp`` is used and the KL is the k3
    estimate ``exp(ref - logp) - (ref - logp) - 1``.
    """
    if group.advantages is None:
        group.advantages = compute_advantages(group.rewards, config)
    G = len(group.trajectories)
    eps, beta = config.clip_epsilon, config.kl_coefficient

    if policy is not None:
        logprob_table = policy.log_probs()
        ref_table = (ref_policy or policy).log_probs()
        p_table = np.exp(logprob_table)
        kl_rows = (p_table * (logprob_table - ref_table)).sum(axis=1)
        grad = np.zeros_like(policy.params)
    else:
        grad = None

    loss = 0.0
    kl_total = 0.0
    clipped = 0
    counted = 0
    logp_grads = []
    for i, traj in enumerate(group.trajectories):
        n = traj.n_policy_tokens
        if n == 0:
            raise EmptyMask(f"trajectory {i} has no policy tokens")
        idx = np.flatnonzero(traj.mask)
        adv = float(group.advantages[i])
        if policy is not None:
            if traj.states is None:
                raise ValueError("toy policy needs per-token states")
            s, a = traj.states[idx], traj.token_ids[idx]
            logp = logprob_table[s, a]
        else:
            if traj.logp is None:
                raise ValueError("trajectory has no current log-probs")
            logp = traj.logp[idx]

        ratio = np.exp(logp - traj.logp_old[idx])
        clipped_ratio = np.clip(ratio, 1 - eps, 1 + eps)
        surrogate = np.minimum(ratio * adv, clipped_ratio * adv)
        # gradient flows through the unclipped branch only where it is the minimum
        active = ratio * adv <= clipped_ratio * adv
        clipped += int((~active).sum())
        counted += len(idx)

        if policy is not None:
            kl_tok = kl_rows[s]
            dkl_dlogp = np.zeros(len(idx))
        else:
            d = traj.logp_ref[idx] - logp
            kl_tok = np.exp(d) - d - 1
            dkl_dlogp = 1 - np.exp(d)

        weight = 1.0 / (G * n)
        loss -= weight * float((surrogate - beta * kl_tok).sum())
        kl_total += float(kl_tok.mean()) / G

        g_logp = -weight * (np.where(active, ratio * adv, 0.0) - beta * dkl_dlogp)
        full = np.zeros(len(traj.token_ids))
        full[idx] = g_logp
        logp_grads.append(full)

        if policy is not None:
            probs = p_table[s]
            # d logp(a|s) / d params[s, :] = onehot(a) - p(.|s)
            for k, (st, ac) in enumerate(zip(s, a)):
                grad[st] -= g_logp[k] * probs[k]
                grad[st, ac] += g_logp[k]
                # d KL(s) / d params[s, j] = p_j (log p_j - log q_j - KL(s))
                row = p_table[st] * (logprob_table[st] - ref_table[st] - kl_rows[st])
                grad[st] += weight * beta * row

    return LossResult(loss, grad, logp_grads, kl_total, clipped / counted if counted else 0.0)


def reinforce_gradient(group: GrpoGroup, policy: ToyPolicy) -> np.ndarray:
    """Plain policy gradient with the group-mean baseline (loss sign), same token
    normalisation as :func:`grpo_loss`, no clipping and no KL."""
    table = policy.log_probs()
    probs = np.exp(table)
    grad = np.zeros_like(policy.params)
    G = len(group.trajectories)
    for i, traj in enumerate(group.trajectories):
        idx = np.flatnonzero(traj.mask)
        for st, ac in zip(traj.states[idx], traj.token_ids[idx]):
            score = -probs[st].copy()
            score[ac] += 1.0
            grad[st] -= group.advantages[i] * score / (G * len(idx))
    return grad


# --- checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"VRAGCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], arrays: dict[str, np.ndarray], config: dict, seed: int) -> None:
    """Versioned binary checkpoint: magic, version, JSON header, raw little-endian arrays."""
    names = sorted(arrays)
    header = {
        "config": config,
        "seed": seed,
        "arrays": [
            {"name": n, "dtype": "<f8", "shape": list(np.asarray(arrays[n]).shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], dict, int]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, size = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + size])
    offset = 16 + size
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(data, dtype=spec["dtype"], count=count, offset=offset)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)
        offset += count * 8
    return arrays, header["config"], header["seed"]


def config_dict(config: GrpoConfig) -> dict:
    return asdict(config)
