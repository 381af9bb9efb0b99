"""Synthetic sequential worlds and their closed-form diffusion oracles.

Every segment of frames in these worlds (one unit given the previous frame,
or a whole sequence) is a Gaussian mixture whose components share a single
covariance. Under x_t = (1 - t) x0 + t eps such a mixture stays a mixture,
so posterior means, scores and velocities are exact.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .diffusion import integrate


class UnsupportedKind(ValueError):
    pass


WORLD_KINDS = ("gaussian_ar", "branching_gmm")


@dataclass(frozen=True)
class WorldSpec:
    kind: str = "gaussian_ar"
    d: int = 2
    N: int = 8
    a: float = 0.9
    s: float = 0.3
    s0: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if self.kind not in WORLD_KINDS:
            raise ValueError(f"unknown world kind {self.kind!r}; expected one of {WORLD_KINDS}")
        if self.d < 1 or self.N < 1:
            raise ValueError(f"frame_dim and length must be positive (d={self.d}, N={self.N})")
        if not -1.0 < self.a < 1.0:
            raise ValueError(f"transition scalar must satisfy |a| < 1, got {self.a}")
        # zero noise is allowed for degenerate sampling checks; oracles need s > 0
        if self.s < 0 or self.s0 < 0:
            raise ValueError("noise scales must be non-negative")
        if self.kind == "branching_gmm" and not self.mu > 0:
            raise ValueError(f"branching_gmm needs mu > 0, got {self.mu}")

    @classmethod
    def gaussian_ar(cls, **kw) -> WorldSpec:
        return cls(kind="gaussian_ar", **{"d": 2, "N": 8, "a": 0.9, "s": 0.3, "s0": 1.0, **kw})

    @classmethod
    def branching_gmm(cls, **kw) -> WorldSpec:
        return cls(kind="branching_gmm", **{"d": 2, "N": 8, "a": 0.8, "s": 0.15, "mu": 1.0, **kw})

    @property
    def stationary_std(self) -> float:
        return self.s / np.sqrt(1.0 - self.a**2)

    def first_std(self) -> float:
        return self.s0 if self.kind == "gaussian_ar" else self.s

    def offset_axis(self) -> np.ndarray:
        e = np.zeros(self.d)
        e[0] = 1.0
        return e


@dataclass
class SequenceBatch:
    frames: np.ndarray  # (B, N, d)
    seeds: list[int] = field(default_factory=list)

    @property
    def B(self) -> int:
        return self.frames.shape[0]

    @property
    def N(self) -> int:
        return self.frames.shape[1]

    @property
    def d(self) -> int:
        return self.frames.shape[2]

    def units(self, c: int = 1) -> np.ndarray:
        """Frames grouped into AR units: (B, N // c, c * d)."""
        if self.N % c:
            raise ValueError(f"sequence length {self.N} is not a multiple of chunk size {c}")
        return self.frames.reshape(self.B, self.N // c, c * self.d)

    def to_csv(self, path: str | Path) -> None:
        write_sequences_csv(path, self.frames)


def sample_sequences(spec: WorldSpec, B: int, seed: int) -> SequenceBatch:
    if B < 1:
        raise ValueError(f"batch size must be >= 1, got {B}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((B, spec.N, spec.d))
    branches = rng.choice([-1.0, 1.0], size=(B, spec.N)) if spec.kind == "branching_gmm" else None
    frames = np.empty((B, spec.N, spec.d))
    prev = np.zeros((B, spec.d))
    e = spec.offset_axis()
    for i in range(spec.N):
        std = spec.first_std() if i == 0 else spec.s
        x = spec.a * prev + std * noise[:, i]
        if branches is not None:
            x = x + branches[:, i, None] * spec.mu * e
        frames[:, i] = x
        prev = x
    return SequenceBatch(frames, [seed])


def write_sequences_csv(path: str | Path, frames: np.ndarray) -> None:
    """Columnar export: seq_id, frame_idx, dim_0 .. dim_{d-1}."""
    frames = np.asarray(frames)
    B, N, d = frames.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_id", "frame_idx"] + [f"dim_{j}" for j in range(d)])
        for b in range(B):
            for i in range(N):
                w.writerow([b, i] + [repr(float(v)) for v in frames[b, i]])


def read_sequences_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    d = len(head) - 2
    B = 1 + max(int(r[0]) for r in body)
    N = 1 + max(int(r[1]) for r in body)
    out = np.zeros((B, N, d))
    for r in body:
        out[int(r[0]), int(r[1])] = [float(v) for v in r[2:]]
    return out


# -- mixture algebra --------------------------------------------------------
class SharedCovMixture:
    """Mixture sum_k w_k N(m_k, Sigma) with per-row means.

    ``means`` has shape (B, K, D) (one set of component means per query row),
    ``cov`` is (D, D) and shared by every component and row.
    """

    def __init__(self, means: np.ndarray, cov: np.ndarray, weights: np.ndarray | None = None):
        means = np.asarray(means, dtype=np.float64)
        if means.ndim == 2:
            means = means[None]
        self.means = means
        K, D = means.shape[1], means.shape[2]
        self.weights = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        lam, U = np.linalg.eigh(cov)
        self.lam = np.clip(lam, 0.0, None)
        self.U = U
        self.D = D
        # component means in the eigenbasis
        self._mu = means @ U

    @property
    def K(self) -> int:
        return self.means.shape[1]

    def _prep(self, x: np.ndarray, t):
        x = np.asarray(x, dtype=np.float64)
        y = x @ self.U  # (B, D)
        t = np.asarray(t, dtype=np.float64)
        tc = t.reshape(-1, 1) if t.ndim else t
        c = (1.0 - tc) ** 2 * self.lam + tc**2  # (B|1, D) per-direction variance of x_t
        tk = tc[..., None] if t.ndim else tc
        resid = y[:, None, :] - (1.0 - tk) * self._mu  # (B, K, D)
        ck = c[:, None, :] if np.ndim(c) == 2 else c
        return y, tc, c, ck, resid

    def _resp(self, resid, ck):
        logw = np.log(self.weights) - 0.5 * np.sum(resid**2 / ck, axis=-1)
        logw -= logw.max(axis=1, keepdims=True)
        r = np.exp(logw)
        return r / r.sum(axis=1, keepdims=True)

    def responsibilities(self, x, t) -> np.ndarray:
        _, _, _, ck, resid = self._prep(x, t)
        return self._resp(resid, ck)

    def log_density(self, x, t) -> np.ndarray:
        _, _, c, ck, resid = self._prep(x, t)
        c2 = np.broadcast_to(c, (np.shape(x)[0], self.D)) if np.ndim(c) else np.full((np.shape(x)[0], self.D), c)
        quad = -0.5 * np.sum(resid**2 / ck, axis=-1) + np.log(self.weights)
        return logsumexp(quad, axis=1) - 0.5 * np.sum(np.log(2 * np.pi * c2), axis=-1)

    def score(self, x, t) -> np.ndarray:
        _, _, _, ck, resid = self._prep(x, t)
        r = self._resp(resid, ck)
        s = -np.sum(r[..., None] * resid / ck, axis=1)
        return s @ self.U.T

    def posterior_mean(self, x, t) -> np.ndarray:
        """E[x0 | x_t = x]."""
        _, tc, _, ck, resid = self._prep(x, t)
        r = self._resp(resid, ck)
        tk = tc[..., None] if np.ndim(tc) else tc
        gain = (1.0 - tk) * self.lam / ck
        comp = self._mu + gain * resid
        return np.sum(r[..., None] * comp, axis=1) @ self.U.T

    def velocity(self, x, t) -> np.ndarray:
        """E[eps - x0 | x_t]; uses E[eps | x_t] = -t * score so t = 0 is well defined."""
        tcol = np.asarray(t, dtype=np.float64)
        tcol = tcol.reshape(-1, 1) if tcol.ndim else tcol
        return -tcol * self.score(x, t) - self.posterior_mean(x, t)

    def flow_map(self, x, t, steps: int = 8192) -> np.ndarray:
        """PF-ODE endpoint at time 0 starting from (x, t); ``t`` scalar or per row.

        Closed form for a single Gaussian; otherwise Heun integration where each
        row advances along its own uniform grid from t to 0.
        """
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        tcol = np.broadcast_to(t.reshape(-1, 1) if t.ndim else t, (x.shape[0], 1))
        if self.K == 1:
            y = x @ self.U
            mu = self._mu[:, 0, :]
            c = (1.0 - tcol) ** 2 * self.lam + tcol**2
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = np.where(tcol == 0.0, 1.0, np.sqrt(self.lam / c))
            z = mu + gain * (y - (1.0 - tcol) * mu)
            return z @ self.U.T
        tr = tcol[:, 0]
        h = tr / steps
        z = x.copy()
        for j in range(steps, 0, -1):
            ta, tb = tr * (j / steps), tr * ((j - 1) / steps)
            v0 = self.velocity(z, ta)
            zp = z - h[:, None] * v0
            z = z - 0.5 * h[:, None] * (v0 + self.velocity(zp, tb))
        return z

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        B = self.means.shape[0]
        k = rng.choice(self.K, size=B, p=self.weights)
        z = rng.standard_normal((B, self.D)) * np.sqrt(self.lam)
        return self.means[np.arange(B), k] + z @ self.U.T


def _segment_matrices(spec: WorldSpec, start: int, length: int):
    """Linear map from per-frame innovations to frames within a segment.

    Frames j = 0..length-1 of the segment satisfy
    x_j = a^(j+1) x_prev + sum_{k<=j} a^(j-k) (o_k + n_k).
    """
    a = spec.a
    L = np.zeros((length, length))
    for j in range(length):
        for k in range(j + 1):
            L[j, k] = a ** (j - k)
    std = np.full(length, spec.s, dtype=np.float64)
    if start == 0:
        std[0] = spec.first_std()
    cov_frames = L @ np.diag(std**2) @ L.T
    lift = a ** np.arange(1, length + 1)
    return L, cov_frames, lift


def segment_law(spec: WorldSpec, x_prev: np.ndarray | None, start: int, length: int) -> SharedCovMixture:
    """Law of frames start..start+length-1 given the frame before ``start``.

    ``x_prev`` is (B, d); ``None`` or start == 0 means the zero initial state.
    The returned mixture lives on flattened (length * d)-vectors.
    """
    d = spec.d
    if x_prev is None:
        x_prev = np.zeros((1, d))
    x_prev = np.atleast_2d(np.asarray(x_prev, dtype=np.float64))
    if start == 0:
        x_prev = np.zeros_like(x_prev)
    L, cov_frames, lift = _segment_matrices(spec, start, length)
    cov = np.kron(cov_frames, np.eye(d))
    base = (lift[None, :, None] * x_prev[:, None, :]).reshape(x_prev.shape[0], length * d)
    if spec.kind == "gaussian_ar":
        offsets = np.zeros((1, length * d))
    else:
        e = spec.offset_axis()
        signs = np.array(list(itertools.product([1.0, -1.0], repeat=length)))  # (2^length, length)
        offsets = np.einsum("jk,mk,e->mje", L, signs * spec.mu, e).reshape(len(signs), length * d)
    means = base[:, None, :] + offsets[None, :, :]
    return SharedCovMixture(means, cov)


def _prev_frame(prefix) -> np.ndarray | None:
    """Last clean frame of a prefix given as (n, d) or (B, n, d); None if empty."""
    if prefix is None:
        return None
    p = np.asarray(prefix, dtype=np.float64)
    if p.size == 0:
        return None
    if p.ndim == 1:
        return p[None]
    if p.ndim == 2:
        return p[-1:]
    return p[:, -1, :]


def _prefix_len(prefix) -> int:
    if prefix is None:
        return 0
    p = np.asarray(prefix)
    if p.size == 0:
        return 0
    return 1 if p.ndim == 1 else p.shape[-2]


@dataclass
class AnalyticOracle:
    """Exact conditional laws of one AR unit (``chunk`` frames) given its prefix.

    Prefixes are clean frames shaped (n, d) or (B, n, d); the unit index
    defaults to n // chunk.
    """

    spec: WorldSpec
    chunk: int = 1

    def unit_law(self, prefix, unit: int | None = None) -> SharedCovMixture:
        if unit is None:
            unit = _prefix_len(prefix) // self.chunk
        prev = _prev_frame(prefix) if unit > 0 else None
        return segment_law(self.spec, prev, unit * self.chunk, self.chunk)

    def _grouped(self, method: str, x, context, t, unit, **kw) -> np.ndarray:
        """Evaluate a mixture method row-wise from encoded contexts.

        The last ``d`` entries of a causal context are the most recent clean
        frame. Unit 0 and later units have different laws, so rows are split.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        context = np.atleast_2d(np.asarray(context, dtype=np.float64))
        B = x.shape[0]
        unit = np.broadcast_to(np.asarray(unit), (B,))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        out = np.empty_like(x)
        first = unit == 0
        for mask, start in ((first, 0), (~first, self.chunk)):
            if not mask.any():
                continue
            prev = None if start == 0 else context[mask, -self.spec.d :]
            law = segment_law(self.spec, prev, start, self.chunk)
            if start == 0:
                law.means = np.broadcast_to(law.means, (int(mask.sum()),) + law.means.shape[1:])
                law._mu = law.means @ law.U
            out[mask] = getattr(law, method)(x[mask], t[mask], **kw)
        return out

    def velocity(self, x, context, t, unit) -> np.ndarray:
        return self._grouped("velocity", x, context, t, unit)

    def score(self, x, context, t, unit) -> np.ndarray:
        return self._grouped("score", x, context, t, unit)

    def posterior_mean(self, x, context, t, unit) -> np.ndarray:
        return self._grouped("posterior_mean", x, context, t, unit)

    def flow_map(self, x, context, t, unit, steps: int = 8192) -> np.ndarray:
        return self._grouped("flow_map", x, context, t, unit, steps=steps)

    def conditional_mean(self, prefix, unit: int | None = None) -> np.ndarray:
        law = self.unit_law(prefix, unit)
        return np.einsum("k,bkd->bd", law.weights, law.means)

    def sample(self, prefix, rng: np.random.Generator, unit: int | None = None) -> np.ndarray:
        return self.unit_law(prefix, unit).sample(rng)


def _check_open_t(t, op: str) -> None:
    if np.any(np.asarray(t) <= 0) or np.any(np.asarray(t) > 1):
        raise ValueError(f"{op} needs t in (0, 1]")


def oracle_cond_velocity(spec: WorldSpec, prefix, x_t, t, chunk: int = 1) -> np.ndarray:
    if spec.kind != "gaussian_ar":
        raise UnsupportedKind("oracle_cond_velocity is defined for gaussian_ar; use oracle_cond_score for mixtures")
    _check_open_t(t, "oracle_cond_velocity")
    return AnalyticOracle(spec, chunk).unit_law(prefix).velocity(np.atleast_2d(x_t), t)


def oracle_cond_score(spec: WorldSpec, prefix, x_t, t, chunk: int = 1) -> np.ndarray:
    _check_open_t(t, "oracle_cond_score")
    return AnalyticOracle(spec, chunk).unit_law(prefix).score(np.atleast_2d(x_t), t)


def oracle_flow_map(spec: WorldSpec, prefix, x_t, t, chunk: int = 1, steps: int = 8192) -> np.ndarray:
    return AnalyticOracle(spec, chunk).unit_law(prefix).flow_map(np.atleast_2d(x_t), t, steps)


def oracle_cond_expectation(spec: WorldSpec, prefix, x_t, t, chunk: int = 1) -> np.ndarray:
    return AnalyticOracle(spec, chunk).unit_law(prefix).posterior_mean(np.atleast_2d(x_t), t)


def sequence_law(spec: WorldSpec) -> SharedCovMixture:
    """Joint law of a whole sequence, flattened to (N * d)-vectors."""
    return segment_law(spec, None, 0, spec.N)
