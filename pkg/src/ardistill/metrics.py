"""Oracle-backed evaluation: conditional W2, exposure-bias curves, mode coverage, solver order."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .diffusion import TimeGrid, pf_ode_solve
from .models import RolloutConfig, context_from_units, self_rollout, teacher_forced_sample
from .worlds import AnalyticOracle, WorldSpec, sample_sequences

MIN_SAMPLES = 100
GAUSSIAN = "gaussian_ar"
MIXTURE = "branching_gmm"


def _spec(world) -> WorldSpec:
    if isinstance(world, AnalyticOracle):
        return world.spec
    return world


def _prev(prefix, n: int, d: int) -> np.ndarray:
    """Previous frame per sample; None (or an empty prefix) means the first frame."""
    if prefix is None:
        return np.zeros((n, d))
    p = np.asarray(prefix, dtype=np.float64)
    if p.size == 0:
        return np.zeros((n, d))
    if p.ndim == 1:
        return np.broadcast_to(p, (n, d))
    if p.ndim == 3:  # (n, frames, d): take the last frame
        return p[:, -1]
    return p


def residuals(samples: np.ndarray, world, prefix=None) -> np.ndarray:
    """x_i - a x_{i-1}; under the world law this is independent of the prefix."""
    spec = _spec(world)
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return x - spec.a * _prev(prefix, x.shape[0], x.shape[1])


def gaussian_w2(mean: np.ndarray, cov: np.ndarray, target_mean: np.ndarray, target_std: float) -> float:
    """W2 between N(mean, cov) and N(target_mean, target_std^2 I)."""
    lam = np.clip(np.linalg.eigvalsh(np.atleast_2d(cov)), 0.0, None)
    gap = float(np.sum((mean - target_mean) ** 2))
    cov_term = float(np.sum(lam) + len(lam) * target_std**2 - 2 * target_std * np.sum(np.sqrt(lam)))
    return float(np.sqrt(max(gap + cov_term, 0.0)))


def mixture_quantiles(levels: np.ndarray, mu: float, s: float) -> np.ndarray:
    """Quantiles of 0.5 N(-mu, s^2) + 0.5 N(mu, s^2)."""
    if s == 0:
        return np.where(levels < 0.5, -mu, mu)
    lo, hi = -mu - 9 * s, mu + 9 * s
    grid = np.linspace(lo, hi, 40001)
    cdf = 0.5 * (stats.norm.cdf(grid, -mu, s) + stats.norm.cdf(grid, mu, s))
    return np.interp(levels, cdf, grid)


def _w2_stat(r: np.ndarray, spec: WorldSpec, first: bool) -> float:
    if spec.kind == GAUSSIAN:
        std = spec.first_std() if first else spec.s
        cov = np.cov(r, rowvar=False, bias=True) if r.shape[1] > 1 else np.array([[np.var(r)]])
        return gaussian_w2(r.mean(axis=0), cov, np.zeros(r.shape[1]), std)
    proj = np.sort(r @ spec.offset_axis())
    n = len(proj)
    q = mixture_quantiles((np.arange(n) + 0.5) / n, spec.mu, spec.s)
    return float(np.sqrt(np.mean((proj - q) ** 2)))


def conditional_w2(samples: np.ndarray, world, i: int, prefix=None, n_boot: int = 0, seed: int = 0):
    """W2 between generated frames and the oracle conditional law of frame ``i``.

    ``prefix`` is the previous frame per sample (or one shared frame, or None
    for frame 0). Gaussian worlds use the closed-form Gaussian W2 on moments;
    mixture worlds compare sorted offset-axis residuals with mixture quantiles.
    With ``n_boot`` > 0 a (value, bootstrap SE) pair is returned.
    """
    spec = _spec(world)
    r = residuals(samples, spec, prefix if i > 0 else None)
    if r.shape[0] < MIN_SAMPLES:
        raise ValueError(f"conditional_w2 needs at least {MIN_SAMPLES} samples, got {r.shape[0]}")
    first = i == 0
    value = _w2_stat(r, spec, first)
    if not n_boot:
        return value
    rng = np.random.default_rng(seed)
    boots = [_w2_stat(r[rng.integers(0, len(r), len(r))], spec, first) for _ in range(n_boot)]
    return value, float(np.std(boots, ddof=1))


def marginal_std(spec: WorldSpec, i: int) -> float:
    """Per-coordinate std of frame i for the Gaussian world."""
    a2 = spec.a**2
    var = a2**i * spec.first_std()**2 + spec.s**2 * sum(a2**j for j in range(i))
    return float(np.sqrt(var))


def _marginal_ref(spec: WorldSpec, i: int, seed: int, ref_size: int) -> np.ndarray | None:
    if spec.kind == GAUSSIAN:
        return None
    return np.sort(sample_sequences(spec, ref_size, seed + 7919).frames[:, i] @ spec.offset_axis())


def _marginal_stat(x: np.ndarray, spec: WorldSpec, i: int, ref: np.ndarray | None) -> float:
    if spec.kind == GAUSSIAN:
        cov = np.cov(x, rowvar=False, bias=True) if x.shape[1] > 1 else np.array([[np.var(x)]])
        return gaussian_w2(x.mean(axis=0), cov, np.zeros(x.shape[1]), marginal_std(spec, i))
    proj = np.sort(x @ spec.offset_axis())
    q = np.quantile(ref, (np.arange(len(proj)) + 0.5) / len(proj))
    return float(np.sqrt(np.mean((proj - q) ** 2)))


def marginal_w2(samples: np.ndarray, world, i: int, seed: int = 0, ref_size: int = 100_000, n_boot: int = 0):
    """W2 between generated frames and the world's marginal law of frame ``i``.

    Closed form for the Gaussian world; for the mixture world the offset-axis
    projection is compared with quantiles of a large seeded reference sample.
    """
    spec = _spec(world)
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    ref = _marginal_ref(spec, i, seed, ref_size)
    value = _marginal_stat(x, spec, i, ref)
    if not n_boot:
        return value
    rng = np.random.default_rng(seed + 1)
    boots = [_marginal_stat(x[rng.integers(0, len(x), len(x))], spec, i, ref) for _ in range(n_boot)]
    return value, float(np.std(boots, ddof=1))


# -- mode statistics ----------------------------------------------------------
def _require_mixture(spec: WorldSpec, op: str) -> None:
    if spec.kind != MIXTURE:
        raise ValueError(f"{op} needs a {MIXTURE} world, got {spec.kind!r}")


def mode_coverage(samples: np.ndarray, world, prefix=None) -> tuple[float, float, float]:
    """Occupancy of the +mu and -mu modes and the coverage score min(p+, p-) / 0.5."""
    spec = _spec(world)
    _require_mixture(spec, "mode_coverage")
    proj = residuals(samples, spec, prefix) @ spec.offset_axis()
    p_plus = float(np.mean(proj > 0))
    p_minus = 1.0 - p_plus
    return p_plus, p_minus, min(p_plus, p_minus) / 0.5


def distance_to_nearest_mode(samples: np.ndarray, world, prefix=None) -> np.ndarray:
    spec = _spec(world)
    _require_mixture(spec, "distance_to_nearest_mode")
    r = residuals(samples, spec, prefix)
    off = spec.mu * spec.offset_axis()
    return np.minimum(np.linalg.norm(r - off, axis=1), np.linalg.norm(r + off, axis=1))


def offset_from_mixture_mean(samples: np.ndarray, world, prefix=None) -> np.ndarray:
    """|offset-axis distance| from the conditional mixture mean a x_{i-1}."""
    spec = _spec(world)
    _require_mixture(spec, "offset_from_mixture_mean")
    return np.abs(residuals(samples, spec, prefix) @ spec.offset_axis())


def knn_entropy(x: np.ndarray, k: int = 1, folds: int = 0):
    """Kozachenko-Leonenko differential entropy estimate (nats).

    With ``folds`` > 1 also returns an SE from the spread of estimates on
    disjoint folds, rescaled to the full sample size.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    if n <= k:
        raise ValueError(f"knn_entropy needs more than {k} samples")
    dist, _ = cKDTree(x).query(x, k=k + 1)
    eps = np.maximum(dist[:, k], 1e-300)
    log_vd = (d / 2) * np.log(np.pi) - gammaln(d / 2 + 1)
    value = float(digamma(n) - digamma(k) + log_vd + d * np.mean(np.log(eps)))
    if folds <= 1:
        return value
    parts = [knn_entropy(part, k) for part in np.array_split(x, folds)]
    return value, float(np.std(parts, ddof=1) / np.sqrt(folds))


# -- reports ------------------------------------------------------------------
def fitted_slope(values: np.ndarray, se: np.ndarray | None = None) -> tuple[float, float]:
    """Least-squares slope vs index, with SE propagated from per-point SEs."""
    y = np.asarray(values, dtype=np.float64)
    f = np.arange(len(y), dtype=np.float64)
    if len(y) < 2:
        return 0.0, float("nan")
    w = (f - f.mean()) / np.sum((f - f.mean()) ** 2)
    slope = float(w @ y)
    if se is None:
        return slope, float("nan")
    return slope, float(np.sqrt(np.sum(w**2 * np.asarray(se) ** 2)))


@dataclass
class MetricReport:
    """Per-frame metrics with standard errors, plus summary scalars."""

    metrics: dict[str, np.ndarray] = field(default_factory=dict)
    errors: dict[str, np.ndarray] = field(default_factory=dict)
    num_samples: int = 0

    def add(self, name: str, values, se=None) -> None:
        v = np.asarray(values, dtype=np.float64)
        if not np.isfinite(v).all():
            raise ValueError(f"metric {name!r} has non-finite values")
        self.metrics[name] = v
        self.errors[name] = np.asarray(se, dtype=np.float64) if se is not None else np.full_like(v, np.nan)

    def mean(self, name: str) -> float:
        return float(np.mean(self.metrics[name]))

    def mean_se(self, name: str) -> float:
        se = self.errors[name]
        return float(np.sqrt(np.sum(se**2)) / len(se))

    def slope(self, name: str = "w2_conditional") -> tuple[float, float]:
        return fitted_slope(self.metrics[name], self.errors[name])

    def summary(self) -> dict:
        out = {"num_samples": self.num_samples}
        for name in sorted(self.metrics):
            s, s_se = self.slope(name)
            out[name] = {"mean": self.mean(name), "mean_se": self.mean_se(name), "slope": s, "slope_se": s_se}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "metric", "value", "se"])
        for name in sorted(self.metrics):
            for f, (v, e) in enumerate(zip(self.metrics[name], self.errors[name])):
                w.writerow([f, name, repr(float(v)), repr(float(e))])
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, text: str) -> MetricReport:
        rows = list(csv.DictReader(io.StringIO(text)))
        rep = cls()
        names = sorted({r["metric"] for r in rows})
        for name in names:
            sel = sorted((int(r["frame"]), float(r["value"]), float(r["se"])) for r in rows if r["metric"] == name)
            rep.metrics[name] = np.array([v for _, v, _ in sel])
            rep.errors[name] = np.array([e for _, _, e in sel])
        return rep


def frame_report(frames: np.ndarray, world, seed: int = 0, n_boot: int = 100) -> MetricReport:
    """Per-frame metrics of (B, N, d) sequences, each frame judged against the oracle law given its own prefix."""
    spec = _spec(world)
    B, N, _ = frames.shape
    rep = MetricReport(num_samples=B)
    cols: dict[str, list] = {}

    def put(name, pair):
        cols.setdefault(name, []).append(pair)

    boot = max(n_boot, 2)
    for f in range(N):
        prev = frames[:, f - 1] if f > 0 else None
        put("w2_conditional", conditional_w2(frames[:, f], spec, f, prev, n_boot=boot, seed=seed + f))
        put("w2_marginal", marginal_w2(frames[:, f], spec, f, seed=seed, n_boot=boot))
        put("sample_entropy_estimate", knn_entropy(residuals(frames[:, f], spec, prev), folds=10))
        if spec.kind == MIXTURE:
            p_plus, _, score = mode_coverage(frames[:, f], spec, prev)
            # delta-method SE of min(p, 1 - p) / 0.5, floored at the p = 1/B resolution
            p_eff = min(max(p_plus, 1.0 / B), 1 - 1.0 / B)
            put("mode_coverage_fraction", (score, np.sqrt(p_eff * (1 - p_eff) / B) / 0.5))
    for name, pairs in cols.items():
        rep.add(name, [v for v, _ in pairs], [e for _, e in pairs])
    return rep


def exposure_bias_curve(
    model, world, config: RolloutConfig, num_rollouts: int, seed: int = 0, params=None, n_boot: int = 100
) -> MetricReport:
    """Self-rollout the model and score each frame against the oracle law given the model's own prefix."""
    if num_rollouts < MIN_SAMPLES:
        raise ValueError(f"exposure_bias_curve needs at least {MIN_SAMPLES} rollouts")
    spec = _spec(world)
    units = self_rollout(model, seed, num_rollouts, config, params=params)
    frames = units.reshape(num_rollouts, spec.N, spec.d)
    return frame_report(frames, spec, seed, n_boot)


def teacher_forced_curve(model, world, schedule, num_samples: int, seed: int = 0, chunk: int = 1, n_boot: int = 100) -> MetricReport:
    """Like exposure_bias_curve, but every unit is generated from a ground-truth prefix."""
    spec = _spec(world)
    gt = sample_sequences(spec, num_samples, seed).units(chunk)
    rng = np.random.default_rng(seed + 1)
    out = np.empty_like(gt)
    for i in range(gt.shape[1]):
        noise = rng.standard_normal((num_samples, gt.shape[2]))
        out[:, i] = teacher_forced_sample(model, gt, schedule, i, noise, rng=rng)
    gen = out.reshape(num_samples, spec.N, spec.d)
    truth = gt.reshape(num_samples, spec.N, spec.d)
    rep = MetricReport(num_samples=num_samples)
    w2, se = [], []
    for f in range(spec.N):
        # within a chunk the earlier frames are generated, across chunks they are ground truth
        prev = None if f == 0 else (truth[:, f - 1] if f % chunk == 0 else gen[:, f - 1])
        v, e = conditional_w2(gen[:, f], spec, f, prev, n_boot=n_boot, seed=seed + f)
        w2.append(v)
        se.append(e)
    rep.add("w2_conditional", w2, se)
    return rep


# -- solver order -------------------------------------------------------------
def standard_normal_velocity(x, t):
    """Rectified-flow velocity when the data law is N(0, I)."""
    return (2 * t - 1) / (2 * t * t - 2 * t + 1) * x


def standard_normal_path(x1, t):
    return x1 * np.sqrt(2 * t * t - 2 * t + 1)


def _gaussian_forward(law, x0, t):
    """Flow-map inverse for a single Gaussian: the PF-ODE state at time t that ends at x0."""
    y = x0 @ law.U
    mu = law._mu[:, 0, :]
    c = (1.0 - t) ** 2 * law.lam + t**2
    z = (1.0 - t) * mu + np.sqrt(c / law.lam) * (y - mu)
    return z @ law.U.T


def solver_order_check(
    world: WorldSpec | None = None,
    methods: Sequence[str] = ("euler", "heun"),
    Ks: Sequence[int] = (12, 24, 48, 96),
    seed: int = 0,
    n: int = 256,
    v_fn: Callable | None = None,
) -> dict[str, dict]:
    """Measure the empirical convergence order of the PF-ODE solvers.

    The default problem is the standard-normal conditional, whose path
    x(t) = x(1) sqrt(2t^2 - 2t + 1) is known in closed form. With a Gaussian
    world the problem is a later-frame conditional given a random prefix,
    checked against the closed-form flow map. ``v_fn`` replaces the integrated
    field while the reference stays the true solution. The error at each K is
    the worst RMS deviation over the grid times shared by every K (these
    include the t = 0 endpoint). The endpoint alone is not used: the standard
    normal path is symmetric about t = 1/2, which cancels Heun's leading
    endpoint error and would report order 3. Returns, per method, the errors,
    consecutive error ratios and the order estimate p = mean log2(ratio).
    """
    rng = np.random.default_rng(seed)
    if world is not None:
        spec = _spec(world)
        if spec.kind != GAUSSIAN:
            raise ValueError("solver_order_check needs a gaussian_ar world")
        law = AnalyticOracle(spec).unit_law(rng.standard_normal((n, 1, spec.d)) * spec.stationary_std, 1)
        x1 = rng.standard_normal((n, spec.d))
        true_v = law.velocity

        def exact(t):
            # the closed-form map sends x_1 to x_0; x_t is then the forward map of x_0
            return law.flow_map(x1, 1.0) if t == 0.0 else _gaussian_forward(law, law.flow_map(x1, 1.0), t)
    else:
        x1 = rng.standard_normal((n, 2))
        true_v = standard_normal_velocity

        def exact(t):
            return standard_normal_path(x1, t)

    vel = v_fn or true_v
    coarse = min(Ks)
    if any(K % coarse for K in Ks):
        raise ValueError(f"every K must be a multiple of the smallest ({coarse})")
    shared = np.arange(coarse + 1)[::-1] / coarse
    ref = {float(t): exact(float(t)) for t in shared}
    out = {}
    for method in methods:
        errs = []
        for K in Ks:
            traj = pf_ode_solve(vel, x1, TimeGrid(K).descending(), method)[:: K // coarse]
            errs.append(max(float(np.sqrt(np.mean(np.sum((s.x - ref[float(t)]) ** 2, axis=1)))) for s, t in zip(traj, shared)))
        errs = np.array(errs)
        ratios = np.where(errs[1:] > 0, errs[:-1] / np.where(errs[1:] > 0, errs[1:], 1.0), 1.0)
        out[method] = {
            "K": list(Ks),
            "errors": errs.tolist(),
            "ratios": ratios.tolist(),
            "order": float(np.mean(np.log2(ratios))),
        }
    return out


# -- efficiency ---------------------------------------------------------------
def _events(reports) -> int:
    return sum(int(r.extra.get("supervision_events", 0)) for r in reports)


def efficiency_rollup(ode_reports, cd_reports) -> dict:
    """Teacher-evaluation ratio and auxiliary storage of an ODE pipeline vs a CD pipeline."""
    ode_reports = list(ode_reports) if isinstance(ode_reports, (list, tuple)) else [ode_reports]
    cd_reports = list(cd_reports) if isinstance(cd_reports, (list, tuple)) else [cd_reports]
    e_ode, e_cd = _events(ode_reports), _events(cd_reports)
    if e_ode != e_cd:
        raise ValueError(f"mismatched supervision budgets: ODE {e_ode} vs CD {e_cd} (diff {e_ode - e_cd})")
    ev_ode = sum(r.teacher_evals for r in ode_reports)
    ev_cd = sum(r.teacher_evals for r in cd_reports)
    return {
        "supervision_events": e_ode,
        "teacher_evals_ode": ev_ode,
        "teacher_evals_cd": ev_cd,
        "eval_ratio": ev_ode / ev_cd if ev_cd else float("inf"),
        "aux_bytes_ode": sum(r.aux_bytes for r in ode_reports),
        "aux_bytes_cd": sum(r.aux_bytes for r in cd_reports),
    }


# -- statistics ---------------------------------------------------------------
def wilcoxon_greater(x, y) -> float:
    """One-sided paired Wilcoxon p-value for x > y."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    if np.all(d == 0):
        return 1.0
    return float(stats.wilcoxon(d, alternative="greater").pvalue)
