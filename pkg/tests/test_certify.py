import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from jumpbsde import certify, levy, model, nets, rng as rngs, solver
from jumpbsde.errors import ArgOutOfDomain, DenominatorNonpositive, Infeasible, NonpositiveX

# ---------------------------------------------------------------------------
# lambda interval and F1


def test_feasible_interval_example():
    iv = certify.lambda_feasible_interval(1.0, 1.0, 0.01)
    root = math.sqrt(1 - 12 * 1e-4)
    small_branch = (1 - root) / 0.06
    assert small_branch == pytest.approx(0.010003, abs=1e-6)
    assert iv.feasible and iv.lo == 1.0
    assert iv.hi == pytest.approx((1 + root) / 0.06, rel=1e-14)
    assert iv.hi == pytest.approx(33.3233, abs=1e-4)
    # both ends solve 3 dt K_f l^4 - l^2 + dt K_f = 0 written as a quadratic in l^2
    for v in (small_branch, iv.hi):
        assert 3 * 0.01 * v * v - v + 0.01 == pytest.approx(0.0, abs=1e-12)


def test_infeasible_interval():
    iv = certify.lambda_feasible_interval(1.0, 1.0, 0.3)
    assert not iv.feasible and "1.08" in iv.reason
    iv = certify.lambda_feasible_interval(1.0, 30.0, 0.2)
    assert not iv.feasible
    with pytest.raises(ArgOutOfDomain):
        certify.lambda_feasible_interval(0.0, 1.0, 0.1)


def test_upper_end_grows_as_dt_shrinks():
    highs = [certify.lambda_feasible_interval(1.0, 1.0, dt).hi for dt in (0.1, 0.01, 0.001)]
    assert highs[0] < highs[1] < highs[2]


def test_f1_examples():
    assert certify.f1(1.0, 1.0, 0.01) == pytest.approx(-math.log(0.96) / 0.01, rel=1e-14)
    series = sum(0.04 ** k / k for k in range(1, 30)) / 0.01
    assert certify.f1(1.0, 1.0, 0.01) == pytest.approx(series, rel=1e-12)
    assert abs(certify.f1(1.0, 1.0, 1e-6) - 4.0) <= 1e-4
    with pytest.raises(ArgOutOfDomain):
        certify.f1(10.0, 1.0, 0.05)
    assert certify.f1(1.0, 1.0, 0.01, coefficient=4) == pytest.approx(-math.log(0.95) / 0.01)


def test_f1_increasing_in_dt():
    dts = np.linspace(1e-4, 0.2, 200)
    values = [certify.f1(1.0, 1.0, dt) for dt in dts]
    assert np.all(np.diff(values) > 0)


# ---------------------------------------------------------------------------
# a posteriori constant


def test_posteriori_constant_chain():
    C = certify.posteriori_constant(2.0, 1.0, 1.0, 1.0, 1.0)
    F1bar = 1.0 * (3 * 2 + 1 / 2) + 1.0
    assert F1bar == 7.5
    bracket = 1 + (1 + 6.5) / (1 - 0.5)
    assert bracket == 16.0
    assert C == pytest.approx(2 * 2 * math.exp(7.5) * 16, rel=1e-12)
    assert C == pytest.approx(115714.71452518804, rel=1e-12)


def test_posteriori_constant_zero_driver():
    for K_nu in (0.5, 3.0):
        expected = 2 * (1 + 1 / 0.7) * math.exp(0.7 * 2.0) * (1 + 1 / min(1, 1 / K_nu))
        assert certify.posteriori_constant(1.0, 0.7, 0.0, K_nu, 2.0) == pytest.approx(expected, rel=1e-14)


def test_posteriori_constant_boundary():
    with pytest.raises(DenominatorNonpositive):
        certify.posteriori_constant(2.0, 1.0, 1.0, 2.0, 1.0)  # l2 == (1 v K_nu) K_f
    with pytest.raises(ArgOutOfDomain):
        certify.posteriori_constant(2.0, 0.0, 1.0, 1.0, 1.0)


def test_constant_blows_up_at_both_ends_of_lambdabar():
    mid = certify.posteriori_constant(2.0, 0.6, 1.0, 1.0, 1.0)
    assert certify.posteriori_constant(2.0, 1e-9, 1.0, 1.0, 1.0) > 1e6 * mid
    assert certify.posteriori_constant(2.0, 200.0, 1.0, 1.0, 1.0) > 1e60 * mid


def test_minimizer_example_and_lambdabar_oracle():
    opt = certify.minimize_posteriori(1.0, 1.0, 1.0, 0.01)
    # the lambdabar part log(1 + 1/lb) + lb T has its stationary point at lb^2 + lb = 1/T
    assert opt.lambdabar == pytest.approx((-1 + math.sqrt(5)) / 2, rel=1e-7)
    assert opt.interval.lo < opt.lambda_sq < opt.interval.hi
    assert not any(opt.clamped.values())
    again = certify.minimize_posteriori(1.0, 1.0, 1.0, 0.01)
    assert (again.lambda_sq, again.lambdabar, again.C) == (opt.lambda_sq, opt.lambdabar, opt.C)
    doubled = certify.minimize_posteriori(1.0, 1.0, 1.0, 0.01, points=128)
    assert doubled.C == pytest.approx(opt.C, rel=0.01)


@settings(max_examples=20, deadline=None)
@given(K_f=st.floats(0.05, 3.0), K_nu=st.floats(0.0, 4.0), T=st.floats(0.2, 2.0), dt=st.floats(1e-3, 0.05))
def test_minimizer_dominates_random_probes(K_f, K_nu, T, dt):
    try:
        opt = certify.minimize_posteriori(K_f, K_nu, T, dt)
    except Infeasible:
        return
    rng = np.random.default_rng(0)
    strict = max(1.0, K_nu) * K_f
    lo = max(opt.interval.lo, strict * (1 + 1e-6))
    mid = 0.5 * (lo + opt.interval.hi)
    assert opt.C <= certify.posteriori_constant(mid, 1.0, K_f, K_nu, T) * (1 + 1e-12)
    for _ in range(100):
        l2 = rng.uniform(lo, opt.interval.hi)
        lb = rng.uniform(1e-3, certify.LAMBDABAR_MAX)
        assert opt.C <= certify.posteriori_constant(l2, lb, K_f, K_nu, T) * (1 + 1e-9)


def test_minimizer_without_driver_and_infeasible():
    opt = certify.minimize_posteriori(0.0, 1.0, 1.0, 0.1)
    assert opt.lambda_sq == 1.0
    with pytest.raises(Infeasible):
        certify.minimize_posteriori(1.0, 1.0, 1.0, 0.3)


def test_lambda_override_checks():
    certify.check_lambda_override(2.0, 1.0, 1.0, 1.0, 0.01)
    with pytest.raises(Infeasible, match="admissibility"):
        certify.check_lambda_override(1.0, 1.0, 1.0, 1.0, 0.01)  # on the strict boundary
    with pytest.raises(Infeasible):
        certify.check_lambda_override(50.0, 1.0, 1.0, 1.0, 0.01)
    with pytest.raises(Infeasible):
        certify.check_lambda_override(2.0, 0.0, 1.0, 1.0, 0.01)


def test_epsilon_constant():
    assert certify.epsilon_constant(2.0, 1.0, 1.0, 1.0, 1.0) == certify.posteriori_constant(2.0, 1.0, 1.0, 1.0, 1.0)
    power = levy.PowerMeasure(1.0, 0.5)
    masses = [levy.truncate(power, e)[0].total_mass() for e in (0.4, 0.2, 0.1)]
    values = [certify.epsilon_constant(40.0, 1.0, 1.0, m, 1.0) for m in masses]
    assert values[0] <= values[1] <= values[2]
    with pytest.raises(DenominatorNonpositive):
        certify.epsilon_constant(masses[2], 1.0, 1.0, masses[2], 1.0)


def test_evaluators_are_pure():
    a = [certify.f1(1.3, 0.7, 0.02), certify.posteriori_constant(2.0, 0.5, 0.7, 1.2, 1.0),
         certify.minimize_H(certify.BoundInputs(K_f=1, K_g=1, K_b=1, second_moment=1))[1]]
    b = [certify.f1(1.3, 0.7, 0.02), certify.posteriori_constant(2.0, 0.5, 0.7, 1.2, 1.0),
         certify.minimize_H(certify.BoundInputs(K_f=1, K_g=1, K_b=1, second_moment=1))[1]]
    assert a == b


# ---------------------------------------------------------------------------
# a priori constants


def test_H_plug_in():
    inputs = certify.BoundInputs(K_b=1, K_f=1, K_g=1, T=1, second_moment=1)
    assert inputs.K_bar == 1
    factors = (1 + 1) ** 2 * (1 + 5 / 1) * math.exp(1 * (1 + 5 + max(1 + 1 + 1, 5)))
    assert factors == 24 * math.exp(11)
    assert certify.apriori_H(1.0, inputs) == pytest.approx(24 * math.exp(11), rel=1e-12)
    with pytest.raises(NonpositiveX):
        certify.apriori_H(0.0, inputs)


def test_H_degenerate_constants_clamp():
    x, H = certify.minimize_H(certify.BoundInputs())
    assert x == pytest.approx(1e-8)
    assert H == pytest.approx(1.0, abs=1e-7)
    assert certify.apriori_H(2.0, certify.BoundInputs(T=1.5)) == pytest.approx(math.exp(3.0))


def test_H_minimizer_dominates_and_blows_up_at_ends():
    inputs = certify.BoundInputs(K_b=1, K_f=1, K_g=1, T=1, second_moment=1)
    x, H = certify.minimize_H(inputs)
    probes = np.random.default_rng(1).uniform(1e-3, 50, 100)
    assert all(H <= certify.apriori_H(p, inputs) * (1 + 1e-12) for p in probes)
    assert certify.log_apriori_H(1e-6, inputs) > math.log(H) + 100
    assert certify.log_apriori_H(1e3, inputs) > math.log(H) + 100


def test_negative_inputs_rejected():
    with pytest.raises(ArgOutOfDomain):
        certify.BoundInputs(K_f=-1.0)


def test_H_eps_equals_H_without_small_jumps():
    atoms = levy.AtomMeasure([[0.8], [-0.6]], [1.0, 2.0])
    ms = model.make_linear_manufactured(1.0, 0.0, model.constant_skeleton(1, 1.0, 0.0, atoms))
    pipe = solver.build_epsilon_pipeline(ms.problem, 0.5, allow_finite=True)
    assert pipe.stats.small_second_moment == 0.0
    plain = certify.bound_inputs(ms.problem, 0.1)
    trunc = certify.bound_inputs(pipe.problem, 0.1)
    assert certify.apriori_H_eps(1.3, trunc) == certify.apriori_H(1.3, plain)


def test_truncated_sigma_constant_decreases_with_epsilon():
    power = levy.PowerMeasure(1.0, 0.5)
    ms = model.make_linear_manufactured(1.0, 0.0, model.constant_skeleton(1, 1.0, 0.0, power, gamma=1.0))
    ms = model.ManufacturedSolution(
        ms.problem.__class__(**{**ms.problem.__dict__, "constants": model.Constants(K_sigma=0.1, K_gamma=1.0,
                                                                                    K_f=0.5, K_g=1.0)}),
        ms.u, ms.grad_u, ms.hess_u, ms.u_t)
    values = [solver.build_epsilon_pipeline(ms.problem, e).K_sigma_eps for e in (0.4, 0.2, 0.1)]
    assert values[0] > values[1] > values[2] > 0.1
    assert values[2] == pytest.approx(0.1 + math.sqrt(2 * 0.1 ** 1.5 / 1.5), rel=1e-8)


# ---------------------------------------------------------------------------
# Error rho and reports


def linear_setup(M=4, B=400, substeps=4, **params):
    ms = model.build_problem("linear", params)
    grid = solver.TimeGrid(M, ms.problem.T)
    batch = solver.simulate_forward(ms.problem, grid, B, master=5, stream=rngs.EVAL, substeps=substeps)
    return ms, grid, batch


def test_error_rho_oracle_is_zero():
    ms, grid, batch = linear_setup()
    stub = solver.ExactNets(ms.u, ms.grad_u, grid, ms.Y0)
    rho, per_step = certify.error_rho(stub, ms, batch)
    assert rho == 0.0 and per_step == [0.0] * grid.M


def test_error_rho_brute_force_double_loop():
    ms, grid, batch = linear_setup(B=60, measure={"family": "merton", "lambda": 1.5, "delta": 0.4}, x0=0.3)
    fam = nets.NetFamily.zeros(grid.M, [1, 3, 1])
    rho, per_step = certify.error_rho(fam, ms, batch)
    z, w = ms.problem.measure.quadrature()
    K_nu = ms.problem.measure.total_mass()
    brute = []
    for n in range(grid.M):
        t = grid.times[n]
        total = 0.0
        for i in range(batch.B):
            x = batch.X[i, n, 0]
            base = ms.u(t, np.array([[x]]))[0] ** 2
            acc = 0.0
            for zq, wq in zip(z[:, 0], w):
                acc += wq * ms.u(t, np.array([[x + zq]]))[0] ** 2
            total += acc + K_nu * base
        brute.append(total / batch.B)
    np.testing.assert_allclose(per_step, brute, rtol=1e-10)
    assert rho == max(per_step)


def checkpoint_scan(anchored):
    ms, grid, batch = linear_setup(M=4, B=2000)
    fam = solver.init_family(ms.problem, grid, 0)
    values = [certify.error_rho(fam, ms, batch, anchored)[0]]
    out = solver.train(ms.problem, grid, solver.TrainConfig(iterations=300, batch_size=128), fam, checkpoint_every=50)
    probe = fam.copy()
    for k in sorted(out.checkpoints):
        probe.load_flat(out.checkpoints[k])
        values.append(certify.error_rho(probe, ms, batch, anchored)[0])
    assert len(values) >= 5
    return stats.spearmanr(np.arange(len(values)), values)[0], values


def test_error_rho_falls_over_training_checkpoints():
    rho, values = checkpoint_scan(anchored=False)
    assert rho < -0.5, f"Spearman {rho:.3f} over {np.round(values, 3)}: untrained net levels drift"


def test_anchored_error_rho_falls_over_training_checkpoints():
    rho, values = checkpoint_scan(anchored=True)
    assert rho < -0.5


def test_anchoring_ignores_a_constant_level():
    ms, grid, batch = linear_setup()
    shifted = solver.ExactNets(lambda t, x: ms.u(t, x) + 3.0, ms.grad_u, grid, ms.Y0)
    assert certify.error_rho(shifted, ms, batch, anchored=True)[0] == pytest.approx(0.0, abs=1e-20)
    plain = certify.error_rho(shifted, ms, batch)[0]
    assert plain == pytest.approx(9.0 * 2 * ms.problem.measure.total_mass())


def test_apriori_report_oracle_stub():
    ms, grid, batch = linear_setup()
    stub = solver.ExactNets(ms.u, ms.grad_u, grid, ms.Y0)
    report = certify.apriori_report(stub, ms, grid, batch, C_path=2.0, C_lambda3=1.5)
    terms = {t.name: t for t in report.terms}
    for name in ("gap_Z", "gap_Psi", "y0_gap", "error_rho"):
        assert terms[name].value == pytest.approx(0.0, abs=1e-20)
    assert terms["path_regularity"].value == pytest.approx(report.lead * 4 * 2.0 * grid.dt)
    assert terms["dt"].value == pytest.approx((1 + ms.problem.constants.K_g) ** 2 * 1.5 * grid.dt)
    assert report.lead == pytest.approx(3 * report.H_bar * 1.1 * 1.1)
    assert report.excluded == []


def test_apriori_report_excludes_unknown_constants():
    ms, grid, batch = linear_setup()
    report = certify.apriori_report(solver.init_family(ms.problem, grid, 0), ms, grid, batch)
    assert set(report.excluded) == {"path_regularity", "y0_gap", "dt", "error_rho"}
    assert report.total == pytest.approx(sum(t.value for t in report.terms if t.value is not None))
    assert report.labels["Z"] == "E[Z~~_n | X~_n]"
    labelled = certify.apriori_report(solver.init_family(ms.problem, grid, 0), ms, grid, batch, malliavin=True)
    assert labelled.labels["Z"] == "Z(t_n)"


def test_apriori_total_dominates_trained_loss():
    ms, grid, batch = linear_setup(M=5, B=2000)
    out = solver.train(ms.problem, grid, solver.TrainConfig(iterations=200, batch_size=128),
                       solver.init_family(ms.problem, grid, 1))
    report = certify.apriori_report(out.family, ms, grid, batch)
    assert report.total >= report.measured["terminal_loss"]


def test_halving_dt_changes_only_tagged_terms():
    measured = {"gap_Z": 0.3, "gap_Psi": 0.1, "y0_gap": 0.01, "error_rho": 0.2}
    a = certify.assemble_apriori(measured, certify.BoundInputs(K_f=0.5, K_g=1, dt=0.1, C_path=1.0), C_lambda3=2.0)
    b = certify.assemble_apriori(measured, certify.BoundInputs(K_f=0.5, K_g=1, dt=0.05, C_path=1.0), C_lambda3=2.0)
    for ta, tb in zip(a.terms, b.terms):
        if ta.dt_tagged:
            assert tb.value == pytest.approx(ta.value / 2)
        else:
            assert tb.value == ta.value


def test_truncated_weight():
    measured = {"gap_Z": 1.0, "gap_Psi": 0.0, "y0_gap": 0.0, "error_rho": 0.0}
    inputs = certify.BoundInputs(K_f=0.5)
    finite = certify.assemble_apriori(measured, inputs, lambda4=0.2)
    trunc = certify.assemble_apriori(measured, inputs, lambda4=0.2, truncated=True)
    assert trunc.lead / finite.lead == pytest.approx((1 + 1 / 0.2) / 1.2)


# ---------------------------------------------------------------------------
# certificates


def test_certificate_for_oracle_and_random_family():
    ms, grid, _ = linear_setup(M=4)
    stub = solver.ExactNets(ms.u, ms.grad_u, grid, ms.Y0)
    exact = certify.posteriori_certificate(stub, ms.problem, grid, B_eval=5000)
    assert exact.loss == pytest.approx(0.0, abs=1e-20)
    assert exact.bound_value == pytest.approx(0.0, abs=1e-15)
    assert exact.remainder["dt"] == grid.dt
    random = certify.posteriori_certificate(solver.init_family(ms.problem, grid, 0), ms.problem, grid, B_eval=5000)
    assert random.bound_value > exact.bound_value
    assert random.recompute() == random.bound_value
    assert random.F1 == certify.f1(random.lambda_sq, ms.problem.constants.K_f, grid.dt)


def test_bound_is_linear_in_loss():
    ms, grid, _ = linear_setup(M=4)
    cert = certify.posteriori_certificate(solver.init_family(ms.problem, grid, 0), ms.problem, grid, B_eval=2000)
    values = []
    for loss in (0.0, 0.5, 1.0, 2.0):
        probe = certify.Certificate(**{**cert.as_dict(), "loss": loss})
        values.append(probe.recompute())
    assert np.all(np.diff(values) > 0)
    assert values[3] - values[2] == pytest.approx(2 * (values[2] - values[1]))


def test_certificate_override_and_infeasible_override():
    ms, grid, _ = linear_setup(M=20)
    fam = solver.init_family(ms.problem, grid, 0)
    cert = certify.posteriori_certificate(fam, ms.problem, grid, B_eval=500, override=(2.0, 1.0))
    assert cert.lambda_sq == 2.0 and cert.inputs["lambda_override"]
    with pytest.raises(Infeasible):
        certify.posteriori_certificate(fam, ms.problem, grid, B_eval=500, override=(0.1, 1.0))


def test_epsilon_certificate():
    power = levy.PowerMeasure(1.0, 0.5)
    ms = model.make_linear_manufactured(1.0, 0.0, model.constant_skeleton(1, 1.0, 0.0, power, sigma=0.0))
    pipe = solver.build_epsilon_pipeline(ms.problem, 0.1)
    grid = solver.TimeGrid(20, 1.0)
    fam = solver.init_family(pipe.problem, grid, 0)
    cert = certify.posteriori_certificate(fam, pipe.problem, grid, B_eval=2000)
    assert cert.kind == "epsilon" and cert.factor == 2.0
    assert cert.remainder["small_jump_second_moment"] == pytest.approx(0.042164, abs=1e-6)
    assert cert.recompute() == cert.bound_value
    with pytest.raises(ArgOutOfDomain):
        certify.epsilon_certificate(fam, model.build_problem("linear", {}).problem, grid, B_eval=10)
    atoms = levy.AtomMeasure([[0.8], [-0.6]], [1.0, 2.0])
    ms2 = model.make_linear_manufactured(1.0, 0.0, model.constant_skeleton(1, 1.0, 0.0, atoms))
    pipe2 = solver.build_epsilon_pipeline(ms2.problem, 0.5, allow_finite=True)
    cert2 = certify.epsilon_certificate(solver.init_family(pipe2.problem, grid, 0), pipe2, grid, B_eval=500)
    assert cert2.remainder["small_jump_second_moment"] == 0.0


def test_epsilon_scan_trends():
    power = levy.PowerMeasure(1.0, 0.5)
    ms = model.make_linear_manufactured(1.0, 0.0, model.constant_skeleton(1, 1.0, 0.0, power, sigma=0.0))
    remainders, constants = [], []
    for eps in (0.4, 0.2, 0.1):
        pipe = solver.build_epsilon_pipeline(ms.problem, eps)
        remainders.append(pipe.stats.small_second_moment)
        opt = certify.minimize_posteriori(pipe.problem.constants.K_f, pipe.problem.measure.total_mass(), 1.0, 0.05)
        constants.append(opt.C)
    assert remainders[0] > remainders[1] > remainders[2]
    assert constants[0] < constants[1] < constants[2]


def test_fit_remainder_constant():
    assert certify.fit_remainder_constant(0.5, 10.0, 0.01, 0.1) == pytest.approx(4.0)
    assert certify.fit_remainder_constant(0.05, 10.0, 0.01, 0.1) == 0.0
