import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gt_batch, randomize
from ardistill.autodiff import EmaParamSet
from ardistill.diffusion import ONE_STEP, TWO_STEP, TimeGrid, forward_diffuse, generator_transform
from ardistill.models import BIDIRECTIONAL, OracleFlowMap, OracleVelocity, RolloutConfig, VelocityNet, bidir_context, context_from_units
from ardistill.stages import (
    CountingTeacher,
    OdePairStore,
    SequenceOracle,
    StageFailure,
    StageReport,
    causal_cd_loss,
    dmd_direction,
    generate_bidir_pairs,
    generate_ode_pairs,
    score_from_velocity,
    stage1_train,
    stage2_bidir_ode,
    stage2_causal_cd,
    stage2_causal_dmd,
    stage2_causal_ode,
    stage3_asymmetric_dmd,
    x0_from_velocity,
)
from ardistill.worlds import AnalyticOracle, WorldSpec, oracle_flow_map

GAUSS = WorldSpec.gaussian_ar()
BRANCH = WorldSpec.branching_gmm()


def tiny(seed=0, mode="causal", hidden=8):
    return VelocityNet(2, 8, hidden=hidden, depth=1, time_freqs=2, index_dim=2, mode=mode, seed=seed)


def oracle(spec=GAUSS):
    return OracleVelocity(AnalyticOracle(spec))


def same_params(a, b):
    return all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


# -- reports and budgets ---------------------------------------------------------
def test_stage_report_json_round_trip(tmp_path):
    rep = StageReport("stage1", steps=3, teacher_evals=5, aux_bytes=7, wall_ms=1.5, loss_curve=[(0, 1.0), (2, 0.5)], extra={"a": 1})
    import json

    assert {"stage", "steps", "teacher_evals", "aux_bytes", "wall_ms", "loss_curve"} <= set(json.loads(rep.to_json()))
    rep.save(tmp_path / "r.json")
    assert StageReport.load(tmp_path / "r.json") == rep
    assert rep.losses().tolist() == [1.0, 0.5]


def test_zero_step_budgets_leave_params_unchanged():
    t = tiny()
    ref = t.clone()
    rep = stage1_train(t, GAUSS, 0)
    assert same_params(t, ref) and rep.steps == 0 and rep.loss_curve == [] and rep.teacher_evals == 0
    s = randomize(tiny(1), np.random.default_rng(0))
    ref = s.clone()
    stage2_causal_cd(s, oracle(), EmaParamSet.from_params(s.params, 0.9), GAUSS, steps=0)
    stage2_causal_dmd(s, oracle(), tiny(2), GAUSS, steps=0)
    stage3_asymmetric_dmd(s, oracle(), tiny(2), GAUSS, RolloutConfig(ONE_STEP), steps=0)
    assert same_params(s, ref)


def test_stage1_loss_decreases():
    rep = stage1_train(tiny(hidden=32), GAUSS, 400, 64, 3e-3, 0)
    curve = rep.losses()
    n = max(1, len(curve) // 20)
    assert curve[-n:].mean() < curve[:n].mean()


def test_stage1_is_deterministic():
    a, b = tiny(), tiny()
    stage1_train(a, BRANCH, 30, 16, 1e-2, 4)
    stage1_train(b, BRANCH, 30, 16, 1e-2, 4)
    assert same_params(a, b)


def test_stage1_bidirectional_runs():
    net = tiny(mode=BIDIRECTIONAL)
    rep = stage1_train(net, BRANCH, 20, 8, 1e-2, 0)
    assert rep.steps == 20 and np.isfinite(rep.losses()).all()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts():
    net = tiny()
    with pytest.raises(StageFailure, match="stage1"):
        stage1_train(net, WorldSpec.gaussian_ar(s0=1e3, s=1e3), 5, 8, 1e-3, 0)


def test_counting_teacher_counts_rows():
    c = CountingTeacher(oracle())
    c.velocity(np.zeros((5, 2)), np.zeros((5, 8)), 0.5, 1)
    c.velocity(np.zeros((3, 2)), np.zeros((3, 8)), 0.5, 1)
    assert c.count == 8 and c.unit_dim == 2


# -- ODE pairs ---------------------------------------------------------------------
def test_one_trajectory_costs_k_evaluations():
    store, rep = generate_ode_pairs(oracle(), GAUSS, 48, TimeGrid(48), seed=0)
    assert rep.teacher_evals == 48
    assert len(store) == 48 and rep.extra["trajectories"] == 1


def test_fresh_pairs_cost_k_per_pair():
    store, rep = generate_ode_pairs(oracle(), GAUSS, 100, TimeGrid(48), seed=0, pairs_per_trajectory=1)
    assert len(store) == 100 and rep.teacher_evals == 48 * 100
    assert rep.teacher_evals >= 48 * len(store)
    assert len(np.unique(store.t)) > 10


def test_pair_store_bytes_and_round_trip(tmp_path):
    store, rep = generate_ode_pairs(oracle(), GAUSS, 96, TimeGrid(48), seed=1, teacher_id="oracle")
    D, k = 2, 4
    assert store.record_size == 8 * (2 + 2 * D + k * D)
    assert store.nbytes == len(store) * store.record_size == rep.aux_bytes
    path = tmp_path / "pairs.bin"
    store.save(path)
    raw = path.read_bytes()
    assert raw[:8] == b"ARDPAIR\x00"
    back = OdePairStore.load(path)
    for f in ("prefix", "t", "x_t", "x0", "unit"):
        np.testing.assert_array_equal(getattr(back, f), getattr(store, f))
    assert (back.K, back.k) == (48, 4)


def test_pair_store_rejects_bad_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"XXXXXXXX" + bytes(40))
    with pytest.raises(ValueError):
        OdePairStore.load(tmp_path / "x.bin")


def test_stored_endpoints_match_flow_map():
    store, _ = generate_ode_pairs(oracle(), GAUSS, 48 * 64, TimeGrid(48), seed=2)
    top = store.t == 1.0
    prefix = store.prefix[top].reshape(-1, 4, 2)
    units = store.unit[top]
    want = AnalyticOracle(GAUSS).flow_map(store.x_t[top], prefix.reshape(len(units), -1), 1.0, units)
    err = np.sqrt(np.mean(np.sum((store.x0[top] - want) ** 2, axis=1)))
    assert err < 0.1


def test_pairs_are_trajectory_consistent():
    # all 48 pairs of one trajectory share one endpoint, and the t = 1 state is the noise
    store, _ = generate_ode_pairs(oracle(), GAUSS, 48, TimeGrid(48), seed=3)
    assert np.all(store.x0 == store.x0[0])
    assert sorted(store.t.tolist()) == sorted((np.arange(1, 49) / 48).tolist())


# -- causal ODE ----------------------------------------------------------------------
def test_causal_ode_errors():
    with pytest.raises(ValueError, match="empty"):
        OdePairStore.concat([])
    store, _ = generate_ode_pairs(oracle(), GAUSS, 48, seed=0)
    empty = OdePairStore(store.prefix[:0], store.t[:0], store.x_t[:0], store.x0[:0], store.unit[:0], 48, 4)
    with pytest.raises(ValueError, match="empty"):
        stage2_causal_ode(tiny(), empty, 5)
    wide = VelocityNet(3, 8, hidden=4, depth=1)
    with pytest.raises(ValueError, match="dimension"):
        stage2_causal_ode(wide, store, 5)


def test_single_record_overfit():
    store, _ = generate_ode_pairs(oracle(), GAUSS, 48, seed=0)
    one = OdePairStore(store.prefix[:1], store.t[:1], store.x_t[:1], store.x0[:1], store.unit[:1], 48, 4)
    rep = stage2_causal_ode(tiny(hidden=16), one, 400, 1e-2, 0, batch=1)
    assert rep.losses()[-1] < 1e-4


def test_ideal_flow_map_loss_is_solver_floor():
    store, _ = generate_ode_pairs(oracle(), GAUSS, 48 * 32, seed=4)
    G = AnalyticOracle(GAUSS).flow_map(store.x_t, store.prefix, store.t, store.unit)
    loss = np.mean(np.sum((G - store.x0) ** 2, axis=1))
    assert loss < (1 / 48)


# -- causal CD -----------------------------------------------------------------------
def test_cd_counter_identity():
    net = VelocityNet(2, 8, hidden=2, depth=1, time_freqs=1, index_dim=1)
    rep = stage2_causal_cd(net, oracle(), EmaParamSet.from_params(net.params, 0.99), GAUSS, TimeGrid(48), 5000, 1e-3, None, 0, 64)
    assert rep.teacher_evals == 320_000
    assert rep.aux_bytes == 0 and rep.extra["supervision_events"] == 320_000


def test_cd_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        stage2_causal_cd(VelocityNet(3, 8, hidden=4, depth=1), oracle(), None, GAUSS, steps=1)


def test_cd_boundary_target_ignores_ema():
    # with K = 1 every draw is t_1 = 1, the target time is 0 and G(x_hat, 0) = x_hat
    runs = []
    for shift in (0.0, 5.0):
        net = randomize(tiny(), np.random.default_rng(0), 0.3)
        ema = EmaParamSet.from_params(net.params, 0.9)
        for v in ema.shadow.values():
            v += shift
        stage2_causal_cd(net, oracle(), ema, GAUSS, TimeGrid(1), 5, 1e-2, None, 0, 16)
        runs.append(net)
    assert same_params(*runs)


def test_cd_loss_with_exact_flow_map_shrinks_with_dt():
    spec = GAUSS
    orc = AnalyticOracle(spec)
    units, i, ctx = gt_batch(spec, 4000, 0)
    rng = np.random.default_rng(1)
    losses = []
    for K in (48, 96, 192):
        idx = rng.integers(1, K + 1, 4000)
        t = idx / K
        x_t = forward_diffuse(units[np.arange(4000), i], rng.standard_normal((4000, 2)), t)
        x_hat = x_t - (1 / K) * orc.velocity(x_t, ctx, t, i)
        target = orc.flow_map(x_hat, ctx, t - 1 / K, i)
        G = orc.flow_map(x_t, ctx, t, i)
        losses.append(np.mean(np.sum((G - target) ** 2, axis=1)))
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-5


def test_cd_loss_weighting():
    net = randomize(tiny(), np.random.default_rng(0))
    units, i, ctx = gt_batch(GAUSS, 6, 0)
    x_t = np.random.default_rng(1).standard_normal((6, 2))
    target = np.zeros((6, 2))
    a = causal_cd_loss(net, x_t, ctx, 0.5, i, target, 1.0).item()
    b = causal_cd_loss(net, x_t, ctx, 0.5, i, target, 3.0).item()
    assert abs(b - 3 * a) < 1e-12


# -- DMD -----------------------------------------------------------------------------
@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0))
def test_score_velocity_relations(seed, t):
    rng = np.random.default_rng(seed)
    x0, eps = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    x_t = forward_diffuse(x0, eps, t)
    v = eps - x0
    np.testing.assert_allclose(x0_from_velocity(x_t, t, v), x0, atol=1e-9)
    # the conditional score of x_t given x0 is -eps / t
    np.testing.assert_allclose(score_from_velocity(x_t, t, v), -eps / t, atol=1e-8)


def test_dmd_direction_zero_when_scores_agree():
    rng = np.random.default_rng(0)
    x, xt, v = rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    assert not dmd_direction(x, xt, np.full(5, 0.5), v, v).any()


def test_dmd_direction_sign_follows_score_gap():
    rng = np.random.default_rng(1)
    x, xt = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    t = np.full(5, 0.4)
    v_real, v_fake = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    g = dmd_direction(x, xt, t, v_real, v_fake)
    gap = score_from_velocity(xt, t, v_fake) - score_from_velocity(xt, t, v_real)
    ratio = g / gap
    assert np.all(ratio > 0)


def test_stage2_dmd_first_step_zero_when_real_equals_fake():
    teacher = randomize(tiny(), np.random.default_rng(0), 0.3)
    student = teacher.clone()
    ref = student.clone()
    stage2_causal_dmd(student, teacher, teacher.clone(), GAUSS, steps=1, batch=16)
    assert same_params(student, ref)


def test_stage3_first_step_zero_when_real_equals_fake():
    teacher = randomize(tiny(), np.random.default_rng(0), 0.3)
    student = teacher.clone()
    ref = student.clone()
    for depth in ("last_unit", "all_units", "full"):
        stage3_asymmetric_dmd(student, teacher, teacher.clone(), GAUSS, RolloutConfig(TWO_STEP, True), steps=1, batch=8, grad_depth=depth)
        assert same_params(student, ref)


def test_dmd_stationary_at_data_law():
    # oracle sampler as student, exact real and (optimal) fake scores: the mean direction is 0
    spec = BRANCH
    orc = AnalyticOracle(spec)
    sampler = OracleFlowMap(orc, steps=256)
    units, i, ctx = gt_batch(spec, 4000, 3)
    rng = np.random.default_rng(4)
    x = generator_transform(rng.standard_normal((4000, 2)), 1.0, sampler.velocity(rng.standard_normal((4000, 2)), ctx, 1.0, i))
    t = rng.uniform(0.05, 1.0, 4000)
    x_t = forward_diffuse(x, rng.standard_normal((4000, 2)), t)
    real, fake = OracleVelocity(orc), OracleVelocity(AnalyticOracle(spec))
    g = dmd_direction(x, x_t, t, real.velocity(x_t, ctx, t, i), fake.velocity(x_t, ctx, t, i))
    se = g.std(0) / np.sqrt(len(g))
    assert np.all(np.abs(g.mean(0)) <= 3 * se + 1e-15)
    # a shifted student is pushed back toward the data
    shifted = x + np.array([0.3, 0.0])
    xs_t = forward_diffuse(shifted, rng.standard_normal((4000, 2)), t)
    v_fake = OracleVelocity(orc).velocity(xs_t - t[:, None] * 0 - (1 - t[:, None]) * np.array([0.3, 0.0]), ctx, t, i)
    g = dmd_direction(shifted, xs_t, t, real.velocity(xs_t, ctx, t, i), v_fake)
    assert g.mean(0)[0] > 3 * g.std(0)[0] / np.sqrt(len(g))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fake_score_divergence_aborts():
    student = randomize(tiny(), np.random.default_rng(0), 3.0)
    with pytest.raises(StageFailure):
        stage2_causal_dmd(student, oracle(), tiny(), WorldSpec.gaussian_ar(s0=1e3, s=1e3), steps=3, batch=8)


def test_stage3_numeric_failure_names_unit():
    student = randomize(tiny(), np.random.default_rng(0))
    student.params["out.b"].data[...] = np.nan
    with pytest.raises(StageFailure, match="unit 0"):
        stage3_asymmetric_dmd(student, oracle(), tiny(), GAUSS, RolloutConfig(ONE_STEP), steps=1, batch=4)


# -- asymmetry -------------------------------------------------------------------------
def test_real_score_sees_future_units():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 8, 2))
    pert = x.copy()
    pert[:, 6] += 1.0
    seq = SequenceOracle(BRANCH)
    assert not np.allclose(seq.sequence_velocity(x, 0.5)[:, 2], seq.sequence_velocity(pert, 0.5)[:, 2])
    fake = randomize(tiny(), rng)
    same = [fake.velocity(y[:, 2], context_from_units(y, 2, 4), 0.5, 2) for y in (x, pert)]
    assert np.array_equal(*same)


def test_stage3_with_joint_real_score():
    student = randomize(tiny(), np.random.default_rng(0), 0.3)
    rep = stage3_asymmetric_dmd(student, SequenceOracle(GAUSS), tiny(), GAUSS, RolloutConfig(ONE_STEP), steps=2, batch=4)
    assert rep.extra["real"] == "bidirectional" and rep.teacher_evals == 2 * 4 * 8
    bidir = randomize(tiny(mode=BIDIRECTIONAL), np.random.default_rng(1), 0.3)
    rep = stage3_asymmetric_dmd(student, bidir, tiny(), GAUSS, RolloutConfig(ONE_STEP), steps=1, batch=4)
    assert rep.teacher_evals == 4 * 8
    with pytest.raises(ValueError):
        stage3_asymmetric_dmd(student, bidir, tiny(), GAUSS, RolloutConfig(ONE_STEP), steps=1, grad_depth="deep")


# -- bidirectional ODE -----------------------------------------------------------------
def test_bidir_pair_accounting_mirrors_ode_pairs():
    store, rep = generate_bidir_pairs(SequenceOracle(GAUSS), GAUSS, 48 * 8, TimeGrid(48), seed=0, chunk=1, k=4)
    assert len(store) == 48 * 8
    assert rep.aux_bytes == store.nbytes == len(store) * store.record_size
    assert rep.teacher_evals >= 48 * 1


def test_bidir_noisy_prefix_is_same_time_state():
    store, _ = generate_bidir_pairs(SequenceOracle(GAUSS), GAUSS, 48 * 8, TimeGrid(48), seed=0, chunk=1, k=4, prefix="noisy")
    first = store.unit == 0
    assert not store.prefix[first].any()


@pytest.mark.slow
def test_bidir_ode_student_trails_causal_ode():
    # the bidirectional student never saw clean prefixes, so clean teacher forcing is off-distribution
    from ardistill.metrics import conditional_w2
    from ardistill.models import teacher_forced_sample
    from ardistill.worlds import sample_sequences

    steps, batch = 1500, 64
    bi = VelocityNet(2, 8, hidden=32, depth=2, seed=0)
    stage2_bidir_ode(bi, SequenceOracle(GAUSS), GAUSS, steps * batch, TimeGrid(48), steps, 3e-3, 0, batch)
    ode = VelocityNet(2, 8, hidden=32, depth=2, seed=0)
    pairs, _ = generate_ode_pairs(oracle(), GAUSS, steps * batch, TimeGrid(48), seed=1)
    stage2_causal_ode(ode, pairs, steps, 3e-3, 2, batch)
    gt = sample_sequences(GAUSS, 2000, 9).units()
    noise = np.random.default_rng(3).standard_normal((2000, 2))
    w = [conditional_w2(teacher_forced_sample(net, gt, ONE_STEP, 4, noise), GAUSS, 4, gt[:, 3]) for net in (bi, ode)]
    assert w[0] > w[1]
