"""Three-stage pipeline: AR diffusion training, few-step initialization, asymmetric DMD."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Adam, EmaParamSet, Tensor, concat, mean, mul, squared_error, sum_rows
from .diffusion import (
    FlowBatch,
    TimeGrid,
    flow_matching_loss,
    forward_diffuse,
    generator_transform,
    pf_ode_solve,
)
from .models import (
    BIDIRECTIONAL,
    CAUSAL,
    RolloutConfig,
    bidir_context,
    context_from_units,
    few_step_sample_unit,
    few_step_sample_unit_grad,
    self_rollout,
    sequence_velocity,
)
from .worlds import WorldSpec, sample_sequences, sequence_law

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3


class StageFailure(RuntimeError):
    """A training stage aborted; ``stage`` and ``step`` say where."""

    def __init__(self, stage: str, step: int, message: str):
        super().__init__(f"{stage} failed at step {step}: {message}")
        self.stage = stage
        self.step = step


@dataclass
class StageReport:
    stage: str
    steps: int = 0
    teacher_evals: int = 0
    aux_bytes: int = 0
    wall_ms: float = 0.0
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["loss_curve"] = [[int(s), float(v)] for s, v in self.loss_curve]
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> StageReport:
        d = json.loads(Path(path).read_text())
        d["loss_curve"] = [tuple(x) for x in d["loss_curve"]]
        return cls(**d)

    def losses(self) -> np.ndarray:
        return np.array([v for _, v in self.loss_curve])


class CountingTeacher:
    """Wraps a velocity model and counts per-sample forward evaluations."""

    def __init__(self, model):
        self.model = model
        self.count = 0

    def __getattr__(self, name):
        return getattr(self.model, name)

    def velocity(self, x_t, context, t, unit, params=None):
        self.count += np.atleast_2d(x_t).shape[0]
        return self.model.velocity(x_t, context, t, unit)

    def sequence_velocity(self, x_units, t):
        self.count += x_units.shape[0] * x_units.shape[1]
        if hasattr(self.model, "sequence_velocity"):
            return self.model.sequence_velocity(x_units, t)
        return sequence_velocity(self.model, x_units, t)


class _Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.ms = 1000.0 * (time.perf_counter() - self.t0)


def _check_loss(stage: str, step: int, value: float) -> None:
    if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise StageFailure(stage, step, f"loss {value:.4g} exceeds divergence limit {DIVERGENCE_LIMIT:g}")


def _cosine_lr(base: float, step: int, total: int, floor: float = 0.02) -> float:
    return base * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * step / max(total, 1))))


def _gt_batch(world: WorldSpec, rng: np.random.Generator, batch: int, chunk: int) -> np.ndarray:
    return sample_sequences(world, batch, int(rng.integers(2**62))).units(chunk)


def _log_every(steps: int) -> int:
    return max(1, steps // 200)


# -- Stage 1 ------------------------------------------------------------------
def stage1_train(
    teacher,
    world: WorldSpec,
    steps: int,
    batch: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    grid: TimeGrid = TimeGrid(48),
    chunk: int = 1,
    lr_schedule: bool = True,
) -> StageReport:
    """Teacher-forced flow-matching training of an AR (or bidirectional) velocity net.

    Causal nets see the clean ground-truth prefix; bidirectional nets see every
    other unit of the sequence noised to the same time, as in joint denoising.
    """
    report = StageReport("stage1")
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    every = _log_every(steps)
    n_units = world.N // chunk
    with _Timer() as timer:
        for step in range(steps):
            gt = _gt_batch(world, rng, batch, chunk)
            i = rng.integers(0, n_units, batch)
            _, t = grid.sample(rng, batch)
            rows = np.arange(batch)
            eps = rng.standard_normal(gt.shape)
            if teacher.mode == BIDIRECTIONAL:
                noisy = forward_diffuse(gt, eps, t)  # per-row t broadcasts over units
                ctx = np.stack([bidir_context(noisy[r : r + 1], int(i[r]), teacher.k)[0] for r in rows])
                x_t = noisy[rows, i]
            else:
                ctx = context_from_units(gt, i, teacher.k)
                x_t = forward_diffuse(gt[rows, i], eps[rows, i], t)
            fb = FlowBatch(x_t, ctx, t, i, eps[rows, i] - gt[rows, i])
            if lr_schedule:
                opt.lr = _cosine_lr(lr, step, steps)
            loss = flow_matching_loss(teacher, fb)
            value = loss.item()
            _check_loss("stage1", step, value)
            loss.backward()
            opt.step(teacher.params)
            if step % every == 0 or step == steps - 1:
                report.loss_curve.append((step, value))
    report.steps = steps
    report.wall_ms = timer.ms
    return report


# -- ODE pairs ----------------------------------------------------------------
PAIR_MAGIC = b"ARDPAIR\x00"
PAIR_VERSION = 1


@dataclass
class OdePairStore:
    """Teacher PF-ODE pairs (prefix, t, x_t, x_0, unit) kept as flat arrays."""

    prefix: np.ndarray  # (n, k * D) encoded causal context
    t: np.ndarray  # (n,)
    x_t: np.ndarray  # (n, D)
    x0: np.ndarray  # (n, D)
    unit: np.ndarray  # (n,)
    K: int
    k: int
    teacher_id: str = ""

    def __len__(self) -> int:
        return len(self.t)

    @property
    def D(self) -> int:
        return self.x_t.shape[1]

    @property
    def record_size(self) -> int:
        """Bytes per record: unit, t, x_t, x0, prefix as little-endian f64."""
        return 8 * (2 + 2 * self.D + self.k * self.D)

    @property
    def nbytes(self) -> int:
        return len(self) * self.record_size

    def records(self) -> np.ndarray:
        return np.concatenate(
            [self.unit[:, None].astype(np.float64), self.t[:, None], self.x_t, self.x0, self.prefix], axis=1
        )

    def save(self, path: str | Path) -> int:
        head = PAIR_MAGIC + struct.pack("<IIIIQ", PAIR_VERSION, self.K, self.D, self.k, len(self))
        body = np.ascontiguousarray(self.records(), dtype="<f8").tobytes()
        Path(path).write_bytes(head + body)
        return len(head) + len(body)

    @classmethod
    def load(cls, path: str | Path) -> OdePairStore:
        raw = Path(path).read_bytes()
        if raw[:8] != PAIR_MAGIC:
            raise ValueError(f"{path}: not an ODE pair store")
        version, K, D, k, n = struct.unpack("<IIIIQ", raw[8:32])
        if version != PAIR_VERSION:
            raise ValueError(f"{path}: unsupported pair store version {version}")
        rec = np.frombuffer(raw[32:], dtype="<f8").reshape(n, 2 + 2 * D + k * D).astype(np.float64)
        return cls(
            prefix=rec[:, 2 + 2 * D :],
            t=rec[:, 1],
            x_t=rec[:, 2 : 2 + D],
            x0=rec[:, 2 + D : 2 + 2 * D],
            unit=rec[:, 0].astype(np.int64),
            K=K,
            k=k,
        )

    @classmethod
    def concat(cls, parts: list[OdePairStore]) -> OdePairStore:
        if not parts:
            raise ValueError("concat: empty list of pair stores")
        first = parts[0]
        return cls(
            np.concatenate([p.prefix for p in parts]),
            np.concatenate([p.t for p in parts]),
            np.concatenate([p.x_t for p in parts]),
            np.concatenate([p.x0 for p in parts]),
            np.concatenate([p.unit for p in parts]),
            first.K,
            first.k,
            first.teacher_id,
        )


def generate_ode_pairs(
    teacher,
    world: WorldSpec,
    num_pairs: int,
    grid: TimeGrid = TimeGrid(48),
    seed: int = 0,
    chunk: int = 1,
    batch: int = 256,
    teacher_id: str = "",
    pairs_per_trajectory: int | None = None,
) -> tuple[OdePairStore, StageReport]:
    """Solve the teacher's PF-ODE over the full grid, conditioned on ground-truth prefixes.

    One trajectory per (sequence, unit) costs K teacher evaluations. By default
    all K pairs (one per nonzero grid time) are kept; ``pairs_per_trajectory``
    keeps only that many, at distinct random grid times, so 1 means every
    stored pair comes from a fresh trajectory.
    """
    K = grid.K
    ppt = K if pairs_per_trajectory is None else int(pairs_per_trajectory)
    if not 1 <= ppt <= K:
        raise ValueError(f"pairs_per_trajectory must lie in [1, {K}], got {ppt}")
    report = StageReport("ode_pairs")
    counted = CountingTeacher(teacher)
    rng = np.random.default_rng(seed)
    n_traj = math.ceil(num_pairs / ppt)
    n_units = world.N // chunk
    times = grid.descending()
    parts = []
    with _Timer() as timer:
        done = 0
        while done < n_traj:
            nb = min(batch, n_traj - done)
            gt = _gt_batch(world, rng, nb, chunk)
            i = rng.integers(0, n_units, nb)
            ctx = context_from_units(gt, i, teacher.k)
            x1 = rng.standard_normal((nb, gt.shape[2]))
            traj = pf_ode_solve(lambda x, t: counted.velocity(x, ctx, t, i), x1, times)
            x0 = traj[-1].x
            if ppt == K:
                for state in traj[:-1]:
                    parts.append(
                        OdePairStore(ctx, np.full(nb, state.t), state.x, x0, i.copy(), K, teacher.k, teacher_id)
                    )
            else:
                # traj[j] sits at t = (K - j) / K; pick ppt distinct nonzero times per trajectory
                picks = np.argsort(rng.random((nb, K)), axis=1)[:, :ppt]
                xs = np.stack([s.x for s in traj[:-1]], axis=1)
                rows = np.arange(nb)
                for c in range(ppt):
                    j = picks[:, c]
                    parts.append(OdePairStore(ctx, (K - j) / K, xs[rows, j], x0, i.copy(), K, teacher.k, teacher_id))
            done += nb
    store = OdePairStore.concat(parts)
    report.teacher_evals = counted.count
    report.aux_bytes = store.nbytes
    report.wall_ms = timer.ms
    report.extra = {"trajectories": n_traj, "pairs": len(store), "K": K, "pairs_per_trajectory": ppt}
    return store, report


# -- Stage 2 variants ---------------------------------------------------------
def stage2_causal_ode(
    student,
    pairs: OdePairStore,
    steps: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch: int = 64,
    lr_schedule: bool = True,
) -> StageReport:
    """Regress G(x_t, prefix, t) onto stored teacher endpoints."""
    if len(pairs) == 0:
        raise ValueError("stage2_causal_ode: empty pair store")
    if pairs.D != student.unit_dim:
        raise ValueError(f"pair dimension {pairs.D} != student unit dimension {student.unit_dim}")
    report = StageReport("stage2_causal_ode")
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    every = _log_every(steps)
    with _Timer() as timer:
        for step in range(steps):
            j = rng.integers(0, len(pairs), batch)
            if lr_schedule:
                opt.lr = _cosine_lr(lr, step, steps)
            loss = causal_ode_loss(student, pairs.x_t[j], pairs.prefix[j], pairs.t[j], pairs.unit[j], pairs.x0[j])
            value = loss.item()
            _check_loss("stage2_causal_ode", step, value)
            loss.backward()
            opt.step(student.params)
            if step % every == 0 or step == steps - 1:
                report.loss_curve.append((step, value))
    report.steps = steps
    report.wall_ms = timer.ms
    report.extra = {"supervision_events": steps * batch}
    return report


def causal_ode_loss(student, x_t, prefix, t, unit, x0) -> Tensor:
    """Mean over the batch of ||G(x_t, prefix, t) - x0||^2."""
    G = generator_transform(x_t, t, student(x_t, prefix, t, unit))
    return mean(sum_rows(squared_error(G, Tensor(x0))))


def causal_cd_loss(student, x_t, ctx, t, unit, target, w) -> Tensor:
    """Mean of w(t) ||G(x_t, prefix, t) - target||^2, the target already stop-gradient."""
    G = generator_transform(x_t, t, student(x_t, ctx, t, unit))
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (np.shape(x_t)[0],))
    return mean(mul(sum_rows(squared_error(G, Tensor(target))), Tensor(w[:, None])))


def uniform_weight(t: np.ndarray) -> np.ndarray:
    return np.ones_like(t)


def stage2_causal_cd(
    student,
    teacher,
    ema: EmaParamSet,
    world: WorldSpec,
    grid: TimeGrid = TimeGrid(48),
    steps: int = 5000,
    lr: float = 1e-3,
    beta: float | None = None,
    seed: int = 0,
    batch: int = 64,
    chunk: int = 1,
    weight: Callable[[np.ndarray], np.ndarray] = uniform_weight,
    lr_schedule: bool = True,
) -> StageReport:
    """Teacher-forced consistency distillation against one Euler teacher step.

    Each iteration noises ground-truth units to a grid time t, takes one teacher
    step to t - dt under the ground-truth prefix, and pulls G_theta(x_t, t)
    toward the EMA student's G(x_hat, t - dt). The target at t - dt = 0 is x_hat
    itself, which anchors the recursion.
    """
    if teacher.unit_dim != student.unit_dim:
        raise ValueError(f"teacher unit dimension {teacher.unit_dim} != student {student.unit_dim}")
    if beta is not None:
        ema.decay = beta
    report = StageReport("stage2_causal_cd")
    counted = CountingTeacher(teacher)
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    every = _log_every(steps)
    n_units = world.N // chunk
    dt = grid.dt
    with _Timer() as timer:
        for step in range(steps):
            gt = _gt_batch(world, rng, batch, chunk)
            rows = np.arange(batch)
            i = rng.integers(0, n_units, batch)
            ctx = context_from_units(gt, i, student.k)
            _, t = grid.sample(rng, batch)
            eps = rng.standard_normal((batch, gt.shape[2]))
            x_t = forward_diffuse(gt[rows, i], eps, t)
            x_hat = x_t - dt * counted.velocity(x_t, ctx, t, i)
            t_prev = np.maximum(t - dt, 0.0)
            target = generator_transform(x_hat, t_prev, student.velocity(x_hat, ctx, t_prev, i, params=ema.shadow))
            if lr_schedule:
                opt.lr = _cosine_lr(lr, step, steps)
            loss = causal_cd_loss(student, x_t, ctx, t, i, target, weight(t))
            value = loss.item()
            _check_loss("stage2_causal_cd", step, value)
            loss.backward()
            opt.step(student.params)
            ema.update(student.params)
            if step % every == 0 or step == steps - 1:
                report.loss_curve.append((step, value))
    report.steps = steps
    report.teacher_evals = counted.count
    report.wall_ms = timer.ms
    report.extra = {"K": grid.K, "ema_decay": ema.decay, "supervision_events": steps * batch}
    return report


def x0_from_velocity(x_t: np.ndarray, t, v: np.ndarray) -> np.ndarray:
    return generator_transform(x_t, t, v)


def score_from_velocity(x_t: np.ndarray, t, v: np.ndarray) -> np.ndarray:
    """Score of the noised law implied by a velocity field: -(x_t + (1 - t) v) / t."""
    t = np.asarray(t, dtype=np.float64)
    tc = t.reshape(-1, 1) if t.ndim else t
    return -(x_t + (1.0 - tc) * v) / tc


def dmd_direction(x_gen: np.ndarray, x_t: np.ndarray, t: np.ndarray, v_real: np.ndarray, v_fake: np.ndarray) -> np.ndarray:
    """Descent direction for generator samples: (x0_fake - x0_real) / mean|x_gen - x0_real|.

    x0_fake - x0_real is a positive multiple of s_fake - s_real, so this is the
    KL gradient up to a per-sample positive scale.
    """
    x0_real = x0_from_velocity(x_t, t, v_real)
    x0_fake = x0_from_velocity(x_t, t, v_fake)
    norm = np.mean(np.abs(x_gen - x0_real), axis=1, keepdims=True)
    return (x0_fake - x0_real) / np.maximum(norm, 1e-8)


def _dmd_loss(x_gen: Tensor, direction: np.ndarray) -> Tensor:
    # gradient of 0.5 * ||x - stopgrad(x - g)||^2 w.r.t. x is g
    target = Tensor(x_gen.data - direction)
    return mean(sum_rows(squared_error(x_gen, target))) * 0.5


def dmd_generator_loss(student, noise, ctx, unit, direction: np.ndarray) -> Tensor:
    """Surrogate whose parameter gradient is direction . dG/dtheta for the 1-step sample G(noise, 1)."""
    return _dmd_loss(generator_transform(noise, 1.0, student(noise, ctx, 1.0, unit)), direction)


def fake_score_loss(fake, x_clean, ctx, unit, t, eps) -> Tensor:
    """Flow matching of the fake score on generator samples."""
    return flow_matching_loss(fake, FlowBatch(forward_diffuse(x_clean, eps, t), ctx, t, unit, eps - x_clean))


def _fake_step(fake, opt, x_clean, ctx, unit, grid, rng) -> float:
    B = x_clean.shape[0]
    _, t = grid.sample(rng, B)
    loss = fake_score_loss(fake, x_clean, ctx, unit, t, rng.standard_normal(x_clean.shape))
    value = loss.item()
    loss.backward()
    opt.step(fake.params)
    return value


def stage2_causal_dmd(
    student,
    teacher,
    fake,
    world: WorldSpec,
    steps: int = 5000,
    lrs: tuple[float, float] = (1e-4, 1e-3),
    seed: int = 0,
    batch: int = 64,
    grid: TimeGrid = TimeGrid(48),
    chunk: int = 1,
    fake_ratio: int = 5,
    lr_schedule: bool = True,
) -> StageReport:
    """Teacher-forced DMD: every model, including the real score, is causal.

    Each iteration takes one generator step and then ``fake_ratio`` fake-score
    steps on fresh student samples.
    """
    report = StageReport("stage2_causal_dmd")
    counted = CountingTeacher(teacher)
    rng = np.random.default_rng(seed)
    opt_g, opt_f = Adam(lrs[0]), Adam(lrs[1])
    every = _log_every(steps)
    n_units = world.N // chunk
    D = student.unit_dim
    fake_losses = []
    with _Timer() as timer:
        for step in range(steps):
            gt = _gt_batch(world, rng, batch, chunk)
            i = rng.integers(0, n_units, batch)
            ctx = context_from_units(gt, i, student.k)
            noise = rng.standard_normal((batch, D))
            if lr_schedule:
                opt_g.lr = _cosine_lr(lrs[0], step, steps)
            x_gen = generator_transform(noise, 1.0, student(noise, ctx, 1.0, i))
            _, t = grid.sample(rng, batch)
            x_t = forward_diffuse(x_gen.data, rng.standard_normal((batch, D)), t)
            v_real = counted.velocity(x_t, ctx, t, i)
            v_fake = fake.velocity(x_t, ctx, t, i)
            g = dmd_direction(x_gen.data, x_t, t, v_real, v_fake)
            loss = _dmd_loss(x_gen, g)
            loss.backward()
            opt_g.step(student.params)
            if step % every == 0 or step == steps - 1:
                report.loss_curve.append((step, float(np.mean(np.sum(g * g, axis=1)))))

            for _ in range(fake_ratio):
                gt = _gt_batch(world, rng, batch, chunk)
                i = rng.integers(0, n_units, batch)
                ctx = context_from_units(gt, i, student.k)
                noise = rng.standard_normal((batch, D))
                x_gen = generator_transform(noise, 1.0, student.velocity(noise, ctx, 1.0, i))
                fv = _fake_step(fake, opt_f, x_gen, ctx, i, grid, rng)
                _check_loss("stage2_causal_dmd[fake]", step, fv)
                fake_losses.append(fv)
    report.steps = steps
    report.teacher_evals = counted.count
    report.wall_ms = timer.ms
    report.extra = {
        "fake_loss_last": float(np.mean(fake_losses[-50:])) if fake_losses else None,
        "fake_ratio": fake_ratio,
        "supervision_events": steps * batch,
    }
    return report


# -- bidirectional teacher ----------------------------------------------------
class SequenceOracle:
    """Exact joint-sequence velocity, exposed like a bidirectional model."""

    mode = BIDIRECTIONAL

    def __init__(self, world: WorldSpec, chunk: int = 1, k: int = 4):
        self.world = world
        self.law = sequence_law(world)
        self.unit_dim = world.d * chunk
        self.num_units = world.N // chunk
        self.k = k

    def sequence_velocity(self, x_units: np.ndarray, t) -> np.ndarray:
        B = x_units.shape[0]
        v = self.law.velocity(x_units.reshape(B, -1), t)
        return v.reshape(x_units.shape)


def _seq_velocity(teacher, x_units, t):
    if hasattr(teacher, "sequence_velocity"):
        return teacher.sequence_velocity(x_units, t)
    return sequence_velocity(teacher, x_units, t)


def generate_bidir_pairs(
    bidir_teacher,
    world: WorldSpec,
    num_pairs: int,
    grid: TimeGrid = TimeGrid(48),
    seed: int = 0,
    chunk: int = 1,
    k: int = 4,
    batch: int = 128,
    prefix: str = "noisy",
) -> tuple[OdePairStore, StageReport]:
    """Whole-sequence PF-ODE pairs from a bidirectional teacher.

    Every unit of a trajectory yields K pairs. With ``prefix="noisy"`` the
    causal context of a pair is the earlier units of the same trajectory at the
    same time t (so the regression target is E[x0^i | x_t^i, x_t^{<i}]); with
    ``"clean"`` it is the teacher's endpoint for those units.
    """
    if prefix not in ("noisy", "clean"):
        raise ValueError(f"prefix must be 'noisy' or 'clean', got {prefix!r}")
    report = StageReport("bidir_pairs")
    counted = CountingTeacher(bidir_teacher)
    rng = np.random.default_rng(seed)
    n_units = world.N // chunk
    D = world.d * chunk
    per_traj = grid.K * n_units
    n_traj = math.ceil(num_pairs / per_traj)
    parts = []
    with _Timer() as timer:
        done = 0
        while done < n_traj:
            nb = min(batch, n_traj - done)
            x1 = rng.standard_normal((nb, n_units, D))
            traj = pf_ode_solve(lambda x, t: counted.sequence_velocity(x, t), x1, grid.descending())
            x0 = traj[-1].x
            for i in range(n_units):
                unit = np.full(nb, i)
                for state in traj[:-1]:
                    ctx = context_from_units(state.x if prefix == "noisy" else x0, i, k)
                    parts.append(OdePairStore(ctx, np.full(nb, state.t), state.x[:, i], x0[:, i], unit, grid.K, k))
            done += nb
    store = OdePairStore.concat(parts)
    report.teacher_evals = counted.count
    report.aux_bytes = store.nbytes
    report.wall_ms = timer.ms
    report.extra = {"trajectories": n_traj, "pairs": len(store), "K": grid.K}
    return store, report


def stage2_bidir_ode(
    student,
    bidir_teacher,
    world: WorldSpec,
    num_pairs: int,
    grid: TimeGrid = TimeGrid(48),
    steps: int = 5000,
    lr: float = 1e-3,
    seed: int = 0,
    batch: int = 64,
    chunk: int = 1,
    prefix: str = "noisy",
) -> StageReport:
    """ODE distillation of a causal student from bidirectional-teacher trajectories."""
    pairs, gen = generate_bidir_pairs(bidir_teacher, world, num_pairs, grid, seed, chunk, student.k, prefix=prefix)
    report = stage2_causal_ode(student, pairs, steps, lr, seed + 1, batch)
    report.stage = "stage2_bidir_ode"
    report.teacher_evals = gen.teacher_evals
    report.aux_bytes = gen.aux_bytes
    report.wall_ms += gen.wall_ms
    report.extra = {**gen.extra, "supervision_events": steps * batch, "prefix": prefix}
    return report


# -- Stage 3 ------------------------------------------------------------------
GRAD_DEPTHS = ("last_unit", "all_units", "full")


def _ctx_tensor(units: list, k: int, B: int, D: int) -> Tensor:
    kept = units[-k:] if k else []
    parts = [Tensor(np.zeros((B, (k - len(kept)) * D)))] if len(kept) < k else []
    return concat(parts + list(kept))


def _rollout_for_dmd(student, batch, config: RolloutConfig, rng, exit_unit: int, depth: str, need_future: bool, step: int = -1):
    """Self-rollout that keeps differentiable outputs for the units that receive gradient.

    Returns (clean units (B, n, D), {unit: Tensor}, contexts {unit: array}).
    """
    D = student.unit_dim
    n = config.num_units
    out = np.zeros((batch, n, D))
    grads: dict[int, Tensor] = {}
    ctxs: dict[int, np.ndarray] = {}
    live: list[Tensor] = []
    for i in range(n):
        sched = config.schedule_for(i)
        noise = rng.standard_normal((batch, D))
        ctx = context_from_units(out, i, student.k)
        ctxs[i] = ctx
        wants = depth != "last_unit" or i == exit_unit
        try:
            if wants:
                c = _ctx_tensor(live, student.k, batch, D) if depth == "full" else ctx
                g = few_step_sample_unit_grad(student, c, sched, noise, i, rng)
                grads[i] = g
                out[:, i] = g.data
            else:
                out[:, i] = few_step_sample_unit(student, ctx, sched, noise, i, rng=rng)
        except FloatingPointError as exc:
            raise StageFailure("stage3", step, f"rollout numeric failure at unit {i}: {exc}") from exc
        if depth == "full":
            live.append(grads[i])
        if not np.isfinite(out[:, i]).all():
            raise StageFailure("stage3", step, f"rollout produced non-finite values at unit {i}")
        if depth == "last_unit" and i == exit_unit and not need_future:
            break
    return out, grads, ctxs


def stage3_asymmetric_dmd(
    student,
    real,
    fake,
    world: WorldSpec,
    config: RolloutConfig,
    steps: int = 1000,
    lrs: tuple[float, float] = (1e-4, 1e-3),
    seed: int = 0,
    batch: int = 64,
    grid: TimeGrid = TimeGrid(48),
    fake_ratio: int = 5,
    grad_depth: str = "last_unit",
) -> StageReport:
    """DMD on the student's own rollouts with a stronger real score and a causal fake score.

    ``real`` is either causal (an oracle adapter: evaluated per unit given the
    generated prefix) or bidirectional (sees the whole jointly noised rollout).
    ``grad_depth`` picks which generated units carry gradient: one random exit
    unit per step, every unit with cached context held constant, or every unit
    with gradient also flowing through the context.
    """
    if grad_depth not in GRAD_DEPTHS:
        raise ValueError(f"grad_depth must be one of {GRAD_DEPTHS}, got {grad_depth!r}")
    report = StageReport("stage3")
    counted = CountingTeacher(real)
    joint = getattr(real, "mode", CAUSAL) == BIDIRECTIONAL
    rng = np.random.default_rng(seed)
    opt_g, opt_f = Adam(lrs[0]), Adam(lrs[1])
    every = _log_every(steps)
    n = config.num_units
    D = student.unit_dim
    fake_losses = []
    with _Timer() as timer:
        for step in range(steps):
            exit_unit = int(rng.integers(0, n))
            units, grads, ctxs = _rollout_for_dmd(student, batch, config, rng, exit_unit, grad_depth, joint, step)
            _, t = grid.sample(rng, batch)
            eps = rng.standard_normal(units.shape)
            if joint:
                x_t_all = forward_diffuse(units, eps, t)
                v_real_all = counted.sequence_velocity(x_t_all, t)
            total = None
            gnorm = 0.0
            for i, g_t in grads.items():
                x_t = forward_diffuse(units[:, i], eps[:, i], t)
                v_real = v_real_all[:, i] if joint else counted.velocity(x_t, ctxs[i], t, i)
                v_fake = fake.velocity(x_t, ctxs[i], t, i)
                g = dmd_direction(units[:, i], x_t, t, v_real, v_fake)
                gnorm += float(np.mean(np.sum(g * g, axis=1)))
                term = _dmd_loss(g_t, g)
                total = term if total is None else total + term
            total.backward()
            opt_g.step(student.params)
            if step % every == 0 or step == steps - 1:
                report.loss_curve.append((step, gnorm / len(grads)))

            for _ in range(fake_ratio):
                roll = self_rollout(student, int(rng.integers(2**62)), batch, config)
                i = rng.integers(0, n, batch)
                ctx = context_from_units(roll, i, fake.k)
                fv = _fake_step(fake, opt_f, roll[np.arange(batch), i], ctx, i, grid, rng)
                _check_loss("stage3[fake]", step, fv)
                fake_losses.append(fv)
    report.steps = steps
    report.teacher_evals = counted.count
    report.wall_ms = timer.ms
    report.extra = {
        "grad_depth": grad_depth,
        "real": "bidirectional" if joint else "causal",
        "fake_loss_last": float(np.mean(fake_losses[-50:])) if fake_losses else None,
        "schedule": list(config.schedule.times),
        "asd_first_frame": config.asd_first_frame,
    }
    return report
