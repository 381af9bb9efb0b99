"""Rectified-flow diffusion: forward process, velocity targets, PF-ODE solvers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import NumericError, Tensor, mse, mul, sub

VelocityFn = Callable[[np.ndarray, float], np.ndarray]


def alpha(t):
    return 1.0 - np.asarray(t, dtype=np.float64)


def sigma(t):
    return np.asarray(t, dtype=np.float64)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform training grid 0 = t_0 < t_1 < ... < t_K = 1."""

    K: int = 48

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"TimeGrid needs K >= 1, got {self.K}")

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.K + 1, dtype=np.float64) / self.K

    @property
    def dt(self) -> float:
        return 1.0 / self.K

    @property
    def interior(self) -> np.ndarray:
        """Grid times a training step may draw: t_1 ... t_K."""
        return self.points[1:]

    def descending(self) -> list[float]:
        return list(self.points[::-1])

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` grid indices in 1..K and return (indices, times)."""
        idx = rng.integers(1, self.K + 1, size=n)
        return idx, idx / self.K


@dataclass(frozen=True)
class StepSchedule:
    times: tuple[float, ...]

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", ts)
        if not ts:
            raise ValueError("step schedule is empty")
        if ts[0] != 1.0:
            raise ValueError(f"step schedule must start at 1.0, got {ts[0]}")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"step schedule must be strictly descending: {ts}")
        if ts[-1] <= 0.0:
            raise ValueError(f"step schedule entries must lie in (0, 1]: {ts}")

    def __len__(self) -> int:
        return len(self.times)

    @classmethod
    def preset(cls, name: str) -> StepSchedule:
        try:
            return cls(SCHEDULE_PRESETS[name])
        except KeyError:
            raise ValueError(f"unknown schedule {name!r}; presets: {sorted(SCHEDULE_PRESETS)}") from None


SCHEDULE_PRESETS: dict[str, tuple[float, ...]] = {
    "four_step": (1.0, 0.9375, 0.8333, 0.625),
    "two_step": (1.0, 0.8333),
    "one_step": (1.0,),
}
FOUR_STEP = StepSchedule(SCHEDULE_PRESETS["four_step"])
TWO_STEP = StepSchedule(SCHEDULE_PRESETS["two_step"])
ONE_STEP = StepSchedule(SCHEDULE_PRESETS["one_step"])


@dataclass
class DiffusionState:
    x: np.ndarray
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"diffusion time must lie in [0, 1], got {self.t}")
        if not np.isfinite(self.x).all():
            raise NumericError(f"non-finite state at t={self.t}")


def _check_t(t) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"diffusion time outside [0, 1]: {arr}")
    return arr


def _col(t: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Per-row times as a column that broadcasts against ``like``."""
    if t.ndim == 0:
        return t
    if like.ndim >= 2 and t.shape[0] == like.shape[0]:
        return t.reshape((-1,) + (1,) * (like.ndim - 1))
    return t


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _same_shape(op: str, a, b) -> None:
    sa, sb = np.shape(_data(a)), np.shape(_data(b))
    if sa != sb:
        raise ValueError(f"{op}: shape mismatch {sa} vs {sb}")


def forward_diffuse(x0, eps, t):
    """x_t = (1 - t) x0 + t eps. ``t`` is a scalar or one time per row."""
    _same_shape("forward_diffuse", x0, eps)
    t = _check_t(t)
    tc = _col(t, _data(x0))
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        x0t = x0 if isinstance(x0, Tensor) else Tensor(x0)
        et = eps if isinstance(eps, Tensor) else Tensor(eps)
        return mul(x0t, Tensor(np.broadcast_to(1.0 - tc, x0t.shape))) + mul(et, Tensor(np.broadcast_to(tc, et.shape)))
    return (1.0 - tc) * _data(x0) + tc * _data(eps)


def velocity_target(x0, eps):
    _same_shape("velocity_target", x0, eps)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return sub(eps if isinstance(eps, Tensor) else Tensor(eps), x0 if isinstance(x0, Tensor) else Tensor(x0))
    return _data(eps) - _data(x0)


def generator_transform(x_t, t, v):
    """Clean-sample estimate x_t - t v; exactly x_t when t = 0."""
    _same_shape("generator_transform", x_t, v)
    t = _check_t(t)
    tc = _col(t, _data(x_t))
    if isinstance(v, Tensor) or isinstance(x_t, Tensor):
        vt = v if isinstance(v, Tensor) else Tensor(v)
        xt = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        return sub(xt, mul(vt, Tensor(np.broadcast_to(tc, vt.shape))))
    return _data(x_t) - tc * _data(v)


@dataclass
class FlowBatch:
    """Supervision for one flow-matching step: inputs plus target velocity."""

    x_t: np.ndarray
    context: np.ndarray
    t: np.ndarray
    unit: np.ndarray
    v_target: np.ndarray

    def __len__(self) -> int:
        return self.x_t.shape[0]


def flow_matching_loss(model, batch: FlowBatch) -> Tensor:
    if len(batch) == 0:
        raise ValueError("flow_matching_loss: empty batch")
    pred = model(batch.x_t, batch.context, batch.t, batch.unit)
    return mse(pred, Tensor(batch.v_target))


# -- PF-ODE ---------------------------------------------------------------
def _eval(v_fn: VelocityFn, x: np.ndarray, t: float) -> np.ndarray:
    v = np.asarray(v_fn(x, t), dtype=np.float64)
    if not np.isfinite(v).all():
        raise NumericError(f"velocity evaluator returned non-finite values at t={t}")
    return v


def pf_ode_step(v_fn: VelocityFn, state: DiffusionState, t_next: float, method: str = "euler") -> DiffusionState:
    t = state.t
    if not t_next < t:
        raise ValueError(f"pf_ode_step integrates backwards in time: t_next={t_next} >= t={t}")
    h = t_next - t
    v0 = _eval(v_fn, state.x, t)
    if method == "euler":
        x_next = state.x + h * v0
    elif method == "heun":
        x_pred = state.x + h * v0
        v1 = _eval(v_fn, x_pred, t_next)
        x_next = state.x + 0.5 * h * (v0 + v1)
    else:
        raise ValueError(f"unknown solver {method!r}; expected 'euler' or 'heun'")
    return DiffusionState(x_next, float(t_next))


def check_descending_grid(grid: Sequence[float], start: float = 1.0, end: float = 0.0) -> list[float]:
    ts = [float(t) for t in grid]
    if len(ts) < 2 or ts[0] != start or ts[-1] != end:
        raise ValueError(f"time grid must run from {start} to {end}; got {ts[:3]}...{ts[-3:]}")
    if any(b >= a for a, b in zip(ts, ts[1:])):
        raise ValueError("time grid must be strictly descending")
    return ts


def pf_ode_solve(
    v_fn: VelocityFn, x1: np.ndarray, grid: Sequence[float], method: str = "euler"
) -> list[DiffusionState]:
    """Integrate dx = v dt from the first grid time to the last, keeping every state."""
    ts = check_descending_grid(grid)
    traj = [DiffusionState(np.array(x1, dtype=np.float64), ts[0])]
    for t_next in ts[1:]:
        traj.append(pf_ode_step(v_fn, traj[-1], t_next, method))
    return traj


def integrate(v_fn: VelocityFn, x: np.ndarray, t_from: float, t_to: float, steps: int, method: str = "heun") -> np.ndarray:
    """Endpoint of a uniform-step PF-ODE solve between two times."""
    if t_from == t_to:
        return np.array(x, dtype=np.float64)
    state = DiffusionState(np.array(x, dtype=np.float64), float(t_from))
    for t_next in np.linspace(t_from, t_to, steps + 1)[1:]:
        state = pf_ode_step(v_fn, state, float(t_next), method)
    return state.x
