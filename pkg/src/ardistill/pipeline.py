"""End-to-end runs: Stage 1 -> Stage 2 variant -> Stage 3 -> evaluation, with on-disk artifacts."""

from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import EmaParamSet, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .diffusion import StepSchedule, TimeGrid
from .metrics import MetricReport, efficiency_rollup, exposure_bias_curve
from .models import BIDIRECTIONAL, CAUSAL, OracleVelocity, RolloutConfig, VelocityNet
from .stages import (
    SequenceOracle,
    StageFailure,
    StageReport,
    generate_ode_pairs,
    stage1_train,
    stage2_bidir_ode,
    stage2_causal_cd,
    stage2_causal_dmd,
    stage2_causal_ode,
    stage3_asymmetric_dmd,
)
from .worlds import AnalyticOracle

log = logging.getLogger(__name__)


@dataclass
class RunManifest:
    config_hash: str
    config: dict
    version: str = __version__
    seeds: list[int] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    reports: dict[str, str] = field(default_factory=dict)
    metrics: str | None = None
    status: str = "running"
    failed_stage: str | None = None
    diagnostics: str | None = None
    timestamps: dict[str, float] = field(default_factory=dict)

    def save(self, out: Path) -> None:
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default))

    @classmethod
    def load(cls, path: str | Path) -> RunManifest:
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.json"
        return cls(**json.loads(p.read_text()))


def _json_default(v):
    if isinstance(v, float):
        return None
    raise TypeError(type(v))


def _config_dict(cfg: ExperimentConfig) -> dict:
    return {k: ("default" if isinstance(v, float) and np.isnan(v) else v) for k, v in cfg.as_dict().items()}


# -- model construction -------------------------------------------------------
def make_net(cfg: ExperimentConfig, mode: str = CAUSAL, seed_offset: int = 0) -> VelocityNet:
    world = cfg.world_spec()
    return VelocityNet(
        world.d * cfg.chunk,
        world.N // cfg.chunk,
        k=cfg.k,
        mode=mode,
        hidden=cfg.hidden,
        depth=cfg.depth,
        time_freqs=cfg.time_freqs,
        index_dim=cfg.index_dim,
        seed=cfg.seed * 1000 + seed_offset,
    )


def rollout_config(cfg: ExperimentConfig) -> RolloutConfig:
    return RolloutConfig(StepSchedule.preset(cfg.schedule), cfg.asd, cfg.chunk, cfg.N // cfg.chunk)


def oracle_teacher(cfg: ExperimentConfig) -> OracleVelocity:
    return OracleVelocity(AnalyticOracle(cfg.world_spec(), cfg.chunk), cfg.k)


def _save_net(path: Path, net: VelocityNet, extra: dict | None = None) -> None:
    save_checkpoint(path, net.params, meta={"net": net.config(), **(extra or {})})


def load_net(path: str | Path) -> VelocityNet:
    from .autodiff import load_arrays

    _, meta = load_arrays(path)
    net = VelocityNet(**meta["net"])
    load_checkpoint(path, net.params)
    return net


# -- stages -------------------------------------------------------------------
class Run:
    """One (config, seed) run writing into ``out``; stages can be called separately to resume."""

    def __init__(self, cfg: ExperimentConfig, out: str | Path):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.world = cfg.world_spec()
        self.grid = TimeGrid(cfg.K)
        mpath = self.out / "manifest.json"
        prior = RunManifest.load(mpath) if mpath.exists() else None
        if prior is not None and prior.config_hash == cfg.hash():
            self.manifest = prior
        else:
            self.manifest = RunManifest(cfg.hash(), _config_dict(cfg), seeds=[cfg.seed])

    def _record(self, stage: str, report: StageReport, net: VelocityNet | None) -> None:
        rpath = self.out / f"{stage}.report.json"
        report.save(rpath)
        self.manifest.reports[stage] = rpath.name
        if net is not None:
            cpath = self.out / f"{stage}.ckpt"
            _save_net(cpath, net)
            self.manifest.checkpoints[stage] = cpath.name
        self.manifest.timestamps[stage] = time.time()
        self.manifest.save(self.out)

    def _load(self, stage: str) -> VelocityNet:
        name = self.manifest.checkpoints.get(stage)
        if name is None:
            raise FileNotFoundError(f"no {stage} checkpoint in {self.out}; run {stage} first")
        return load_net(self.out / name)

    def teacher(self):
        if self.cfg.teacher == "oracle":
            return oracle_teacher(self.cfg)
        return self._load("stage1")

    def stage1(self) -> StageReport:
        cfg = self.cfg
        if cfg.teacher == "oracle":
            report = StageReport("stage1", extra={"teacher": "oracle"})
            self._record("stage1", report, None)
            return report
        net = make_net(cfg)
        report = stage1_train(net, self.world, cfg.steps1, cfg.batch, cfg.lr1, cfg.seed, self.grid, cfg.chunk)
        self._record("stage1", report, net)
        return report

    def _bidir_net(self) -> VelocityNet:
        cfg = self.cfg
        path = self.out / "bidir.ckpt"
        if path.exists():
            return load_net(path)
        net = make_net(cfg, BIDIRECTIONAL, seed_offset=1)
        report = stage1_train(net, self.world, cfg.steps1, cfg.batch, cfg.lr1, cfg.seed + 17, self.grid, cfg.chunk)
        report.stage = "stage1_bidir"
        self._record("stage1_bidir", report, None)
        _save_net(path, net)
        self.manifest.checkpoints["stage1_bidir"] = path.name
        return net

    def _student_init(self) -> VelocityNet:
        if self.cfg.teacher == "learned":
            return self._load("stage1").clone()
        return make_net(self.cfg, seed_offset=2)

    def stage2(self) -> StageReport:
        cfg = self.cfg
        teacher = self.teacher()
        student = self._student_init()
        seed = cfg.seed + 101
        if cfg.stage2 == "none":
            report = StageReport("stage2_none")
        elif cfg.stage2 == "causal_cd":
            ema = EmaParamSet.from_params(student.params, cfg.ema_beta)
            report = stage2_causal_cd(student, teacher, ema, self.world, self.grid, cfg.steps2, cfg.lr2, None, seed, cfg.batch, cfg.chunk)
        elif cfg.stage2 == "causal_ode":
            n_pairs = cfg.num_pairs or cfg.steps2 * cfg.batch
            if n_pairs == 0:
                report = StageReport("stage2_causal_ode")
            else:
                pairs, gen = generate_ode_pairs(
                    teacher, self.world, n_pairs, self.grid, seed, cfg.chunk, pairs_per_trajectory=cfg.pair_reuse
                )
                pairs.save(self.out / "pairs.bin")
                self.manifest.checkpoints["pairs"] = "pairs.bin"
                report = stage2_causal_ode(student, pairs, cfg.steps2, cfg.lr2, seed + 1, cfg.batch)
                report.teacher_evals += gen.teacher_evals
                report.aux_bytes += gen.aux_bytes
                report.wall_ms += gen.wall_ms
                report.extra.update(gen.extra)
        elif cfg.stage2 == "causal_dmd":
            fake = self.teacher().clone() if cfg.teacher == "learned" else make_net(cfg, seed_offset=3)
            report = stage2_causal_dmd(student, teacher, fake, self.world, cfg.steps2, (cfg.lr3, cfg.lr_fake), seed, cfg.batch, self.grid, cfg.chunk, cfg.fake_ratio)
        else:  # bidir_ode
            bt = SequenceOracle(self.world, cfg.chunk, cfg.k) if cfg.bidir_teacher == "oracle" else self._bidir_net()
            n_pairs = cfg.num_pairs or cfg.steps2 * cfg.batch
            report = stage2_bidir_ode(student, bt, self.world, n_pairs, self.grid, cfg.steps2, cfg.lr2, seed, cfg.batch, cfg.chunk)
        report.extra["variant"] = cfg.stage2
        self._record("stage2", report, student)
        return report

    def stage3(self) -> StageReport:
        cfg = self.cfg
        student = self._load("stage2")
        if cfg.real_score == "oracle":
            real = oracle_teacher(cfg)
        elif cfg.real_score == "sequence_oracle":
            real = SequenceOracle(self.world, cfg.chunk, cfg.k)
        else:
            real = self._bidir_net()
        fake = self.teacher().clone() if cfg.teacher == "learned" else make_net(cfg, seed_offset=3)
        report = stage3_asymmetric_dmd(
            student, real, fake, self.world, rollout_config(cfg), cfg.steps3, (cfg.lr3, cfg.lr_fake),
            cfg.seed + 202, cfg.batch, self.grid, cfg.fake_ratio, cfg.grad_depth,
        )
        self._record("stage3", report, student)
        return report

    def evaluate(self, stage: str = "stage3") -> MetricReport:
        cfg = self.cfg
        student = self._load(stage)
        rep = exposure_bias_curve(student, self.world, rollout_config(cfg), cfg.eval_rollouts, cfg.seed + 303, n_boot=cfg.n_boot)
        rep.save_csv(self.out / "metrics.csv")
        (self.out / "metrics.json").write_text(rep.to_json())
        self.manifest.metrics = "metrics.csv"
        self.manifest.reports["metrics_summary"] = "metrics.json"
        self.manifest.save(self.out)
        return rep


def run_pipeline(cfg: ExperimentConfig, out: str | Path) -> RunManifest:
    """Stage 1 -> Stage 2 -> Stage 3 -> metrics; a failure marks the manifest and keeps partial artifacts."""
    run = Run(cfg, out)
    run.manifest.status = "running"
    run.manifest.failed_stage = None
    run.manifest.diagnostics = None
    for stage in ("stage1", "stage2", "stage3", "eval"):
        try:
            if stage == "eval":
                run.evaluate()
            else:
                getattr(run, stage)()
        except (StageFailure, FloatingPointError, ValueError, ArithmeticError) as exc:
            run.manifest.status = "failed"
            run.manifest.failed_stage = stage
            run.manifest.diagnostics = "".join(traceback.format_exception_only(type(exc), exc)).strip()
            run.manifest.save(run.out)
            log.error("%s failed: %s", stage, exc)
            return run.manifest
    run.manifest.status = "ok"
    run.manifest.save(run.out)
    return run.manifest


# -- comparison ---------------------------------------------------------------
COMPARE_KEYS = ("world", "d", "N", "a", "s", "s0", "mu", "chunk", "schedule", "asd")


def compare_runs(dirs: list[str | Path], out: str | Path | None = None) -> list[dict]:
    """Per-variant table: mean +- SE over seeds of the run metrics, exposure slope and efficiency."""
    if len(dirs) < 2:
        raise ValueError("compare_runs needs at least two runs")
    runs = []
    for d in dirs:
        m = RunManifest.load(d)
        if m.metrics is None:
            raise ValueError(f"{d}: run has no metrics (status {m.status})")
        runs.append((Path(d), m))
    ref = runs[0][1].config
    for d, m in runs[1:]:
        diff = {k: (ref.get(k), m.config.get(k)) for k in COMPARE_KEYS if ref.get(k) != m.config.get(k)}
        if diff:
            raise ValueError(f"incompatible runs {runs[0][0]} and {d}: {diff}")
    groups: dict[str, list] = {}
    for d, m in runs:
        groups.setdefault(m.config["stage2"], []).append((d, m))
    base = runs[0][1].config["stage2"]
    rows = []
    for variant, members in groups.items():
        w2, slope, cov, evals, aux = [], [], [], [], []
        for d, m in members:
            rep = MetricReport.from_csv((d / m.metrics).read_text())
            w2.append(rep.mean("w2_conditional"))
            slope.append(rep.slope("w2_conditional")[0])
            if "mode_coverage_fraction" in rep.metrics:
                cov.append(rep.mean("mode_coverage_fraction"))
            s2 = StageReport.load(d / m.reports["stage2"])
            evals.append(s2.teacher_evals)
            aux.append(s2.aux_bytes)
        row = {"variant": variant, "runs": len(members)}
        for name, vals in (("w2", w2), ("slope", slope), ("coverage", cov)):
            if vals:
                row[name] = float(np.mean(vals))
                row[f"{name}_se"] = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        row["teacher_evals"] = float(np.mean(evals))
        row["aux_bytes"] = float(np.mean(aux))
        rows.append(row)
    by = {r["variant"]: r for r in rows}
    for r in rows:
        r["w2_delta"] = r["w2"] - by[base]["w2"]
        r["eval_ratio_vs_" + base] = r["teacher_evals"] / by[base]["teacher_evals"] if by[base]["teacher_evals"] else float("nan")
    if "causal_ode" in by and "causal_cd" in by:
        ode = [StageReport.load(d / m.reports["stage2"]) for d, m in groups["causal_ode"]]
        cd = [StageReport.load(d / m.reports["stage2"]) for d, m in groups["causal_cd"]]
        if len(ode) == len(cd):
            eff = efficiency_rollup(ode, cd)
            by["causal_ode"]["efficiency_ratio"] = eff["eval_ratio"]
    if out is not None:
        _write_compare(rows, Path(out))
    return rows


def _write_compare(rows: list[dict], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cols = sorted({k for r in rows for k in r} - {"variant"})
    cols = ["variant"] + cols
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r.get(c), float) else str(r.get(c, "")) for c in cols))
    (out / "compare.csv").write_text("\n".join(lines) + "\n")
    width = max(len(c) for c in cols)
    text = []
    for r in rows:
        text.append(f"== {r['variant']} ==")
        for c in cols[1:]:
            v = r.get(c, "")
            text.append(f"  {c:<{width}}  {v:.4g}" if isinstance(v, float) else f"  {c:<{width}}  {v}")
    (out / "compare.txt").write_text("\n".join(text) + "\n")
