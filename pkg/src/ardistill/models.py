"""Conditional velocity networks, context caches, few-step samplers and rollout."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .autodiff import NumericError, ParamSet, Tensor, add, concat, matmul, silu
from .diffusion import FOUR_STEP, StepSchedule, forward_diffuse, generator_transform

CAUSAL = "causal"
BIDIRECTIONAL = "bidirectional"


class VelocityModel(Protocol):
    """Anything that maps (x_t, encoded context, t, unit index) to a velocity."""

    unit_dim: int
    k: int

    def velocity(self, x_t, context, t, unit) -> np.ndarray: ...


def time_embedding(t: np.ndarray, freqs: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    w = np.pi * 2.0 ** (np.arange(freqs) / 2.0)
    return np.concatenate([t, np.sin(w * t), np.cos(w * t)], axis=1)


class VelocityNet:
    """MLP velocity model v(x_t | context, t, unit).

    Input is [x_t, context, time embedding, unit embedding]; the output layer
    starts at zero so a fresh net predicts v = 0 everywhere. In causal mode the
    context holds the last ``k`` clean units; in bidirectional mode it holds the
    ``k`` previous and ``k`` following units, zero padded at the ends.
    """

    def __init__(
        self,
        unit_dim: int,
        num_units: int,
        k: int = 4,
        mode: str = CAUSAL,
        hidden: int = 256,
        depth: int = 4,
        time_freqs: int = 8,
        index_dim: int = 8,
        seed: int = 0,
    ):
        if mode not in (CAUSAL, BIDIRECTIONAL):
            raise ValueError(f"mode must be {CAUSAL!r} or {BIDIRECTIONAL!r}, got {mode!r}")
        self.unit_dim = unit_dim
        self.num_units = num_units
        self.k = k
        self.mode = mode
        self.hidden = hidden
        self.depth = depth
        self.time_freqs = time_freqs
        self.index_dim = index_dim
        self.seed = seed
        self.eval_count = 0

        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        self.params.add("unit_emb", rng.standard_normal((num_units, index_dim)))
        fan = unit_dim + self.context_dim + (1 + 2 * time_freqs) + index_dim
        for layer in range(depth):
            self.params.add(f"h{layer}.w", rng.standard_normal((fan, hidden)) * np.sqrt(2.0 / fan))
            self.params.add(f"h{layer}.b", np.zeros(hidden))
            fan = hidden
        self.params.add("out.w", np.zeros((fan, unit_dim)))
        self.params.add("out.b", np.zeros(unit_dim))

    @property
    def context_dim(self) -> int:
        n = self.k if self.mode == CAUSAL else 2 * self.k
        return n * self.unit_dim

    def config(self) -> dict:
        return {
            "unit_dim": self.unit_dim,
            "num_units": self.num_units,
            "k": self.k,
            "mode": self.mode,
            "hidden": self.hidden,
            "depth": self.depth,
            "time_freqs": self.time_freqs,
            "index_dim": self.index_dim,
            "seed": self.seed,
        }

    def clone(self) -> VelocityNet:
        other = copy.copy(self)
        other.params = ParamSet()
        for pid, p in self.params.items():
            other.params.add(pid, p.data.copy())
        other.eval_count = 0
        return other

    def _features(self, x_t, context, t, unit) -> tuple[np.ndarray, np.ndarray]:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        B = x_t.shape[0]
        context = np.atleast_2d(np.asarray(context, dtype=np.float64))
        if x_t.shape[1] != self.unit_dim or context.shape != (B, self.context_dim):
            raise ValueError(
                f"VelocityNet: expected x_t (B, {self.unit_dim}) and context (B, {self.context_dim}); "
                f"got {x_t.shape} and {context.shape}"
            )
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("VelocityNet: t outside [0, 1]")
        unit = np.broadcast_to(np.asarray(unit, dtype=np.int64), (B,))
        if np.any(unit < 0) or np.any(unit >= self.num_units):
            raise IndexError(f"unit index outside [0, {self.num_units})")
        onehot = np.zeros((B, self.num_units))
        onehot[np.arange(B), unit] = 1.0
        return np.concatenate([x_t, context, time_embedding(t, self.time_freqs)], axis=1), onehot

    def __call__(self, x_t, context, t, unit) -> Tensor:
        """Differentiable forward pass through the live parameters."""
        feats, onehot = self._features(x_t, context, t, unit)
        self.eval_count += 1
        p = self.params
        h = concat([Tensor(feats), matmul(Tensor(onehot), p["unit_emb"])])
        for layer in range(self.depth):
            h = silu(add(matmul(h, p[f"h{layer}.w"]), p[f"h{layer}.b"]))
        out = add(matmul(h, p["out.w"]), p["out.b"])
        return out

    def velocity(self, x_t, context, t, unit, params: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """Gradient-free forward pass, optionally with substitute parameters (e.g. an EMA shadow)."""
        feats, onehot = self._features(x_t, context, t, unit)
        self.eval_count += 1
        P = params if params is not None else {pid: q.data for pid, q in self.params.items()}
        h = np.concatenate([feats, onehot @ P["unit_emb"]], axis=1)
        for layer in range(self.depth):
            z = h @ P[f"h{layer}.w"] + P[f"h{layer}.b"]
            h = z / (1.0 + np.exp(-z))
        out = h @ P["out.w"] + P["out.b"]
        if not np.isfinite(out).all():
            raise NumericError(
                f"VelocityNet produced non-finite output (|x_t|max={np.abs(x_t).max():.3g}, "
                f"t range=[{np.min(t):.3g}, {np.max(t):.3g}])"
            )
        return out


class OracleVelocity:
    """Adapter exposing an AnalyticOracle through the VelocityModel interface."""

    mode = CAUSAL

    def __init__(self, oracle, k: int = 4):
        self.oracle = oracle
        self.unit_dim = oracle.spec.d * oracle.chunk
        self.num_units = oracle.spec.N // oracle.chunk
        self.k = k
        self.eval_count = 0

    @property
    def context_dim(self) -> int:
        return self.k * self.unit_dim

    def velocity(self, x_t, context, t, unit, params=None) -> np.ndarray:
        self.eval_count += 1
        return self.oracle.velocity(x_t, context, t, unit)


class OracleFlowMap(OracleVelocity):
    """Perfect few-step generator: v = (x - flow_map(x, t)) / t, so G(x, t) is the exact flow-map endpoint."""

    def __init__(self, oracle, k: int = 4, steps: int = 2048):
        super().__init__(oracle, k)
        self.steps = steps

    def velocity(self, x_t, context, t, unit, params=None) -> np.ndarray:
        self.eval_count += 1
        x_t = np.atleast_2d(x_t)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x_t.shape[0],))
        if np.any(t <= 0):
            raise ValueError("OracleFlowMap needs t > 0")
        x0 = self.oracle.flow_map(x_t, context, t, unit, steps=self.steps)
        return (x_t - x0) / t[:, None]


def predict_velocity(model, x_t, context, t, unit) -> Tensor:
    out = model(x_t, context, t, unit)
    if not np.isfinite(out.data).all():
        raise NumericError(f"predict_velocity: non-finite output at unit {unit}")
    return out


# -- context ------------------------------------------------------------------
@dataclass
class ContextCache:
    """Most recent ``k`` clean units for each sequence in a batch."""

    batch: int
    unit_dim: int
    k: int
    frames: list[np.ndarray] = field(default_factory=list)
    index: int = 0

    def push(self, unit_frames: np.ndarray) -> None:
        unit_frames = np.asarray(unit_frames, dtype=np.float64).reshape(self.batch, self.unit_dim)
        self.frames.append(unit_frames.copy())
        if len(self.frames) > self.k:
            self.frames.pop(0)
        self.index += 1

    @classmethod
    def from_prefix(cls, prefix: np.ndarray, k: int) -> ContextCache:
        """Cache pre-filled with ground-truth units; ``prefix`` is (B, n, unit_dim)."""
        prefix = np.asarray(prefix, dtype=np.float64)
        cache = cls(prefix.shape[0], prefix.shape[2], k)
        for i in range(prefix.shape[1]):
            cache.push(prefix[:, i])
        return cache

    def __len__(self) -> int:
        return len(self.frames)


def encode_context(cache: ContextCache, k: int | None = None) -> np.ndarray:
    k = cache.k if k is None else k
    kept = cache.frames[-k:] if k else []
    pad = k - len(kept)
    parts = [np.zeros((cache.batch, pad * cache.unit_dim))] + kept
    return np.concatenate(parts, axis=1)


def context_from_units(units: np.ndarray, i, k: int) -> np.ndarray:
    """Causal context for unit ``i`` built from a (B, n_units, D) array of clean units.

    ``i`` may be a scalar or one index per row.
    """
    B, n, D = units.shape
    i = np.broadcast_to(np.asarray(i), (B,))
    out = np.zeros((B, k, D))
    for j in range(k):
        src = i - k + j
        ok = src >= 0
        out[ok, j] = units[np.nonzero(ok)[0], src[ok]]
    return out.reshape(B, k * D)


def bidir_context(units: np.ndarray, i: int, k: int) -> np.ndarray:
    """Previous ``k`` and following ``k`` units around unit ``i``, zero padded."""
    B, n, D = units.shape
    out = np.zeros((B, 2 * k, D))
    for j, src in enumerate(list(range(i - k, i)) + list(range(i + 1, i + k + 1))):
        if 0 <= src < n:
            out[:, j] = units[:, src]
    return out.reshape(B, 2 * k * D)


def sequence_velocity(model, x_units: np.ndarray, t) -> np.ndarray:
    """Velocity of every unit of a jointly-noised sequence under a bidirectional model.

    ``t`` is a scalar or one time per sequence.
    """
    B, n, D = x_units.shape
    ctx = np.concatenate([bidir_context(x_units, i, model.k) for i in range(n)], axis=0)
    flat = np.concatenate([x_units[:, i] for i in range(n)], axis=0)
    units = np.repeat(np.arange(n), B)
    tt = np.tile(np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)), n)
    v = model.velocity(flat, ctx, tt, units)
    return np.stack([v[i * B : (i + 1) * B] for i in range(n)], axis=1)


# -- sampling ---------------------------------------------------------------
def _velocity_fn(model, params):
    if params is None:
        return model.velocity
    return lambda x, c, t, u: model.velocity(x, c, t, u, params=params)


def few_step_sample_unit(
    model,
    cache: ContextCache | np.ndarray,
    schedule: StepSchedule,
    noise: np.ndarray,
    i: int,
    rng: np.random.Generator | None = None,
    renoise: list[np.ndarray] | None = None,
    params=None,
) -> np.ndarray:
    """Generate one clean unit by consistency-style few-step sampling.

    At each schedule time the model's clean estimate G = x - t v is formed;
    between steps the estimate is re-noised to the next time with fresh noise
    (taken from ``renoise`` if given, otherwise drawn from ``rng``).
    """
    if len(schedule) == 0:
        raise ValueError("empty schedule")
    ctx = encode_context(cache) if isinstance(cache, ContextCache) else np.asarray(cache)
    vfn = _velocity_fn(model, params)
    x = np.asarray(noise, dtype=np.float64)
    x0 = x
    times = schedule.times
    for j, t in enumerate(times):
        x0 = generator_transform(x, t, vfn(x, ctx, t, i))
        if j + 1 < len(times):
            if renoise is not None:
                eps = renoise[j]
            elif rng is not None:
                eps = rng.standard_normal(x.shape)
            else:
                raise ValueError("multi-step sampling needs an rng or explicit re-noise draws")
            x = forward_diffuse(x0, eps, times[j + 1])
    return x0


def few_step_sample_unit_grad(model, ctx, schedule: StepSchedule, noise, i, rng) -> Tensor:
    """Few-step sample whose final step is differentiable w.r.t. the model.

    Earlier steps run without gradient; only the last network evaluation is on the tape.
    """
    x = np.asarray(noise, dtype=np.float64)
    times = schedule.times
    ctx_in = ctx.data if isinstance(ctx, Tensor) else ctx
    for j, t in enumerate(times[:-1]):
        x0 = generator_transform(x, t, model.velocity(x, ctx_in, t, i))
        x = forward_diffuse(x0, rng.standard_normal(x.shape), times[j + 1])
    t = times[-1]
    if isinstance(ctx, Tensor):
        return _grad_step_with_ctx(model, x, ctx, t, i)
    return generator_transform(x, t, model(x, ctx_in, t, i))


def _grad_step_with_ctx(model, x, ctx: Tensor, t, i) -> Tensor:
    # differentiable context: evaluate on live params and let gradient flow into ctx
    feats, onehot = model._features(x, ctx.data, t, i)
    model.eval_count += 1
    p = model.params
    D = model.unit_dim
    tail = Tensor(feats[:, D + model.context_dim :])
    h = concat([Tensor(feats[:, :D]), ctx, tail, matmul(Tensor(onehot), p["unit_emb"])])
    for layer in range(model.depth):
        h = silu(add(matmul(h, p[f"h{layer}.w"]), p[f"h{layer}.b"]))
    v = add(matmul(h, p["out.w"]), p["out.b"])
    return generator_transform(x, t, v)


@dataclass
class RolloutConfig:
    schedule: StepSchedule
    asd_first_frame: bool = False
    chunk: int = 1
    num_units: int = 8

    def schedule_for(self, unit: int) -> StepSchedule:
        if self.asd_first_frame and unit == 0:
            return FOUR_STEP
        return self.schedule


def self_rollout(model, seed: int, batch: int, config: RolloutConfig, params=None, force_prefix: np.ndarray | None = None) -> np.ndarray:
    """Generate ``batch`` sequences of ``config.num_units`` units, each conditioned on its own history.

    Returns clean units shaped (batch, num_units, unit_dim). If ``force_prefix``
    (B, n, unit_dim) is given, the cache is filled from it instead of from the
    generations (teacher forcing through the rollout path).
    """
    rng = np.random.default_rng(seed)
    D = model.unit_dim
    cache = ContextCache(batch, D, model.k)
    out = np.empty((batch, config.num_units, D))
    for i in range(config.num_units):
        noise = rng.standard_normal((batch, D))
        sched = config.schedule_for(i)
        ren = [rng.standard_normal((batch, D)) for _ in range(len(sched) - 1)]
        out[:, i] = few_step_sample_unit(model, cache, sched, noise, i, renoise=ren, params=params)
        cache.push(force_prefix[:, i] if force_prefix is not None else out[:, i])
    return out


def teacher_forced_sample(model, gt_units: np.ndarray, schedule: StepSchedule, i: int, noise: np.ndarray, rng=None, renoise=None, params=None) -> np.ndarray:
    """Sample unit ``i`` with context from ground-truth units ``gt_units[:, :i]``."""
    gt_units = np.asarray(gt_units)
    if not 0 <= i < gt_units.shape[1]:
        raise IndexError(f"unit index {i} outside [0, {gt_units.shape[1]})")
    ctx = context_from_units(gt_units, i, model.k)
    return few_step_sample_unit(model, ctx, schedule, noise, i, rng=rng, renoise=renoise, params=params)
