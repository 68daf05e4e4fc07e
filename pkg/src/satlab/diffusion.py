"""Noise schedule, deterministic DDIM sampling and inversion, and the set driver.

Sampler state is kept in float64; denoisers may compute in float32 inside.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .attention import ShareContext


class InversionError(tc.NumericError):
    def __init__(self, step, message="non-finite state during DDIM inversion"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ValueError("alpha_bar needs T+1 >= 2 entries")
        if a[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(a) >= 0) or np.any(a <= 0):
            raise ValueError("alpha_bar must be strictly decreasing and positive")
        a.setflags(write=False)
        object.__setattr__(self, "alpha_bar", a)

    @property
    def T(self):
        return self.alpha_bar.size - 1

    @classmethod
    def cosine(cls, T, offset=0.008, max_beta=0.1):
        """Cosine schedule normalized to alpha_bar[0] = 1, per-step beta capped at ``max_beta``."""
        f = np.cos(((np.arange(T + 1) / T) + offset) / (1 + offset) * math.pi / 2) ** 2
        ratios = np.maximum(f[1:] / f[:-1], 1.0 - max_beta)
        return cls(np.concatenate([[1.0], np.cumprod(ratios)]))

    def __eq__(self, other):
        return isinstance(other, NoiseSchedule) and np.array_equal(self.alpha_bar, other.alpha_bar)

    def __hash__(self):
        return hash(self.alpha_bar.tobytes())


def _check_t(t, sched, low=0):
    if not low <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [{low}, {sched.T}]")


def forward_noise(x0, t, eps, sched):
    _check_t(t, sched)
    a = sched.alpha_bar[t]
    if t == 0:
        return np.array(x0, dtype=np.float64, copy=True)
    return math.sqrt(a) * np.asarray(x0, np.float64) + math.sqrt(1.0 - a) * np.asarray(eps, np.float64)


def ddim_step(x_t, eps_hat, t, sched, sigma=0.0, z=None):
    """One reverse step t -> t-1: mean update plus ``sigma * z``."""
    if t == 0:
        raise ValueError("ddim_step needs t >= 1")
    _check_t(t, sched, low=1)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    a_t, a_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    ratio = math.sqrt(a_prev) / math.sqrt(a_t)
    coef = math.sqrt(1.0 - a_prev) - math.sqrt(1.0 - a_t) * ratio
    out = ratio * np.asarray(x_t, np.float64) + coef * np.asarray(eps_hat, np.float64)
    if sigma:
        out = out + sigma * np.asarray(z, np.float64)
    return out


def ddim_invert_step(x_t, eps_hat, t, sched):
    """Inverse of :func:`ddim_step` (sigma = 0): t -> t+1 with ``eps_hat`` frozen."""
    _check_t(t + 1, sched, low=1)
    a_t, a_next = sched.alpha_bar[t], sched.alpha_bar[t + 1]
    ratio = math.sqrt(a_next / a_t)
    coef = math.sqrt(1.0 - a_next) - math.sqrt(a_next * (1.0 - a_t) / a_t)
    return ratio * np.asarray(x_t, np.float64) + coef * np.asarray(eps_hat, np.float64)


@dataclass
class Trajectory:
    """States ``x_t`` keyed by timestep, stored in the order they were produced."""

    ts: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def append(self, t, x):
        if self.ts and abs(t - self.ts[-1]) != 1:
            raise ValueError("trajectory timesteps must be adjacent")
        self.ts.append(int(t))
        self.states.append(np.asarray(x))

    def at(self, t):
        return self.states[self.ts.index(t)]

    def __len__(self):
        return len(self.ts)

    def save(self, stem):
        """Write ``stem.satn`` (concatenated SATN records) and ``stem.idx`` ("t offset" lines)."""
        lines = []
        with open(f"{stem}.satn", "wb") as fh:
            for t, x in zip(self.ts, self.states):
                lines.append(f"{t} {fh.tell()}")
                tc.write_tensor(fh, x)
        with open(f"{stem}.idx", "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, stem):
        traj = cls()
        with open(f"{stem}.idx") as idx, open(f"{stem}.satn", "rb") as fh:
            for line in idx:
                if not line.strip():
                    continue
                t, offset = (int(v) for v in line.split())
                fh.seek(offset)
                traj.append(t, tc.read_tensor(fh))
        return traj


def ddim_invert(x0, content_id, model, sched):
    """Deterministic inversion x_0 -> x_T with sharing disabled; returns the trajectory."""
    x = np.asarray(x0, dtype=np.float64)
    traj = Trajectory()
    traj.append(0, x)
    for t in range(sched.T):
        eps = model.predict(x, content_id, t, sched)
        x = ddim_invert_step(x, eps, t, sched)
        if not np.all(np.isfinite(x)):
            raise InversionError(t + 1)
        traj.append(t + 1, x)
    return traj


def initial_noise(seed, shape):
    """x_T for one image; a fixed seed gives the same noise in any set."""
    return tc.randn(tc.Rng(seed, stream=0x0D1F), shape, np.float64)


@dataclass
class SetResult:
    images: np.ndarray
    # layer -> list (one per stream) of (heads, m, keys) arrays, at ``probs_step``
    probs: dict | None = None
    probs_step: int | None = None


def ddim_sample(model, x_T, content_ids, sched, cfg=None, probs_step=None):
    """Deterministic DDIM from explicit starting states ``(n, H, W, C)``.

    ``probs_step`` (a timestep) records every layer's attention
    probabilities at that step.
    """
    x = np.array(x_T, dtype=np.float64)
    result = SetResult(images=None)
    for t in range(sched.T, 0, -1):
        record = probs_step == t
        ctx = ShareContext(record=record)
        eps = model.predict(x, content_ids, t, sched, cfg, ctx)
        x = ddim_step(x, eps, t, sched)
        if record:
            result.probs, result.probs_step = ctx.probs, t
    result.images = x
    return result


def sample_set(model, content_ids, seeds, sched, cfg=None, image_shape=(16, 16, 3), probs_step=None):
    """Generate a set from per-image noise seeds; image 0 is the reference."""
    content_ids = list(content_ids)
    seeds = list(seeds)
    if not content_ids:
        raise ValueError("sample_set needs at least one image")
    if len(seeds) != len(content_ids):
        raise ValueError("one seed per image required")
    x = np.stack([initial_noise(s, image_shape) for s in seeds])
    return ddim_sample(model, x, content_ids, sched, cfg, probs_step)


def restyle_from_image(model, image, ref_content, target_contents, seeds, sched, cfg):
    """Invert ``image`` and generate targets that share attention with its replayed trajectory.

    Returns ``(images, trajectory)``; ``images[0]`` is the replayed
    reconstruction (the recorded ``x_0``), followed by one image per target.
    """
    traj = ddim_invert(image, ref_content, model, sched)
    target_contents = list(target_contents)
    seeds = list(seeds)
    if len(seeds) != len(target_contents):
        raise ValueError("one seed per target required")
    if not target_contents:
        return np.asarray(traj.at(0))[None], traj
    shape = np.shape(image)
    targets = np.stack([initial_noise(s, shape) for s in seeds])
    ids = [ref_content] + target_contents
    for t in range(sched.T, 0, -1):
        # the reference row is replayed from the inversion, not stepped
        batch = np.concatenate([traj.at(t)[None], targets])
        eps = model.predict(batch, ids, t, sched, cfg, ShareContext())
        targets = ddim_step(targets, eps[1:], t, sched)
    images = np.concatenate([np.asarray(traj.at(0))[None], targets])
    return images, traj
