import numpy as np
import pytest

from conftest import sample_consistent_systems
from dissicert.polyalg import Polynomial, VarContext, parse_polynomial
from dissicert.sysdata import (
    CumulativelyBounded,
    DataSet,
    ModelTemplate,
    SeparatelyBounded,
    SystemModel,
    aggregate_noise_form,
    membership_cb,
    membership_sb,
    sb_noise,
    simulate,
)
from dissicert.verify import (
    DISSIPATIVE,
    INDETERMINATE,
    DegreeBudgetError,
    NoBoundInRange,
    SupplyRate,
    VerdictCertificate,
    VerifyOptions,
    _assemble_cb,
    data_driven_gain,
    dissipation_margin,
    gain_bisect,
    model_based_gain,
    sample_feasible_points,
    verify_cb,
    verify_model,
    verify_sb_general,
    verify_sb_quadratic,
)

CTX = VarContext(["x1", "u1"])


def poly(s):
    return parse_polynomial(s, CTX)


# scalar oracle: x+ = 0.5 x + u has exact l2-gain 2 (storage 2 x^2 certifies it)
SYSTEM = SystemModel(("x1",), ("u1",), [poly("0.5*x1 + u1")])
TEMPLATE = ModelTemplate(("x1",), ("u1",), [poly("x1"), poly("u1")])
CONSTRAINTS = [poly("x1^2 - 1"), poly("u1^2 - 1")]
DATA = DataSet([[1.0], [0.0]], [[0.0], [1.0]], [[0.5], [1.0]])
NOISE = SeparatelyBounded(np.array([1e-3, 1e-3]))
A_ORACLE = np.array([[0.5, 1.0]])
OPTS = VerifyOptions(storage_degree=2)
BOX = [(-1.0, 1.0), (-1.0, 1.0)]


class TestSupplyRate:
    def test_gain_quadratic_form(self):
        q, s, r = SupplyRate.gain(3.0).as_qsr(2, 1)
        np.testing.assert_allclose(q, -np.eye(2))
        np.testing.assert_allclose(s, np.zeros((2, 1)))
        np.testing.assert_allclose(r, [[9.0]])

    def test_gain_as_poly(self):
        p = SupplyRate.gain(2.0).as_poly(CTX, ("x1",), ("u1",))
        rng = np.random.default_rng(0)
        for _ in range(10):
            x, u = rng.normal(size=2)
            assert p.eval([x, u]) == pytest.approx(4.0 * u * u - x * x, abs=1e-12)

    def test_qsr_validation(self):
        with pytest.raises(ValueError):
            SupplyRate.qsr([[0.0, 1.0], [0.0, 0.0]], np.zeros((2, 1)), [[1.0]])
        sized = SupplyRate.qsr(-np.eye(2), np.zeros((2, 1)), [[1.0]])
        with pytest.raises(ValueError):
            sized.as_qsr(1, 1)

    def test_with_gamma(self):
        assert SupplyRate.gain(2.0).with_gamma(3.0).gamma == 3.0
        with pytest.raises(ValueError):
            SupplyRate.qsr([[-1.0]], [[0.0]], [[1.0]]).with_gamma(3.0)
        with pytest.raises(ValueError):
            SupplyRate.gain(-1.0)

    def test_poly_supply_has_no_quadratic_form(self):
        sup = SupplyRate.from_poly(poly("u1^2 - x1^4"))
        with pytest.raises(ValueError):
            sup.as_qsr(1, 1)


class TestVerifyOptions:
    def test_degree_validation(self):
        with pytest.raises(ValueError):
            VerifyOptions(storage_degree=3)
        with pytest.raises(ValueError):
            VerifyOptions(multiplier_degree=-2)
        with pytest.raises(ValueError):
            VerifyOptions(tau_monomial_degree=1)
        assert VerifyOptions(tau_monomial_degree=None).tau_monomial_degree is None
        with pytest.raises(ValueError):
            VerifyOptions(solver_tol=0.0)


class TestModelEngine:
    def test_certifies_above_the_gain(self):
        cert = verify_model(SYSTEM, CONSTRAINTS, SupplyRate.gain(2.05), OPTS)
        assert cert.verdict == DISSIPATIVE
        assert cert.dissipative

    def test_refuses_below_the_gain(self):
        cert = verify_model(SYSTEM, CONSTRAINTS, SupplyRate.gain(1.90), OPTS)
        assert cert.verdict == INDETERMINATE
        assert cert.message

    def test_unconstrained_gain(self):
        res = model_based_gain(SYSTEM, None, (0.5, 8.0))
        assert res.gamma == pytest.approx(2.0, abs=0.05)

    def test_bisect_and_direct_agree(self):
        res_b = model_based_gain(SYSTEM, CONSTRAINTS, (0.5, 8.0), OPTS)
        res_d = model_based_gain(SYSTEM, CONSTRAINTS, (0.5, 8.0), OPTS, mode="direct")
        assert res_b.gamma == pytest.approx(2.0, abs=0.05)
        assert res_d.gamma == pytest.approx(2.0, abs=0.12)
        assert res_d.mode in ("direct", "direct+bisect")

    def test_zero_dynamics_hits_the_floor(self):
        zero = SystemModel(("x1",), ("u1",), [Polynomial.zero(CTX)])
        res = model_based_gain(zero, CONSTRAINTS, (0.05, 4.0), OPTS)
        assert res.gamma == 0.05
        assert len(res.history) == 2

    def test_storage_is_nonnegative(self):
        cert = verify_model(SYSTEM, CONSTRAINTS, SupplyRate.gain(2.2), OPTS)
        assert cert.dissipative
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = rng.uniform(-1, 1)
            assert cert.storage_value([x]) >= -1e-9

    def test_soundness_margin_on_region(self):
        cert = verify_model(SYSTEM, CONSTRAINTS, SupplyRate.gain(2.2), OPTS)
        pts = sample_feasible_points(CONSTRAINTS, BOX, 200, rng=0)
        assert dissipation_margin(cert, SYSTEM, pts).min() >= -1e-6

    def test_large_gain_stays_well_scaled(self):
        cert = verify_model(SYSTEM, CONSTRAINTS, SupplyRate.gain(1000.0), OPTS)
        assert cert.dissipative
        assert all(c.ok for c in cert.certificates)


def threshold_engine(threshold):
    def engine(g):
        verdict = DISSIPATIVE if g >= threshold else INDETERMINATE
        return VerdictCertificate(verdict=verdict, engine="synthetic",
                                  supply=SupplyRate.gain(g))
    return engine


class TestGainSearch:
    def test_converges_to_the_threshold(self):
        res = gain_bisect(threshold_engine(3.0), (1.0, 10.0), rel_tol=1e-3)
        assert res.gamma == pytest.approx(3.0, rel=2e-3)
        assert res.certificate.supply.gamma == res.gamma
        assert res.history[0][0] == 10.0

    def test_no_bound_in_range(self):
        with pytest.raises(NoBoundInRange):
            gain_bisect(threshold_engine(20.0), (1.0, 10.0))

    def test_bottom_of_range_returns_immediately(self):
        res = gain_bisect(threshold_engine(0.5), (1.0, 10.0))
        assert res.gamma == 1.0
        assert len(res.history) == 2

    def test_argument_validation(self):
        eng = threshold_engine(3.0)
        with pytest.raises(ValueError):
            gain_bisect(eng, (1.0, 10.0), rel_tol=0.0)
        with pytest.raises(ValueError):
            gain_bisect(eng, (-1.0, 10.0))
        with pytest.raises(ValueError):
            gain_bisect(eng, (2.0, 2.0))
        with pytest.raises(ValueError):
            gain_bisect(eng, (1.0, float("inf")))


class TestDataDrivenEngines:
    def test_sb_quadratic_verdicts(self):
        good = verify_sb_quadratic(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(2.2), OPTS)
        bad = verify_sb_quadratic(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(1.8), OPTS)
        assert good.dissipative
        assert not bad.dissipative

    def test_sb_general_verdicts(self):
        good = verify_sb_general(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(2.2), OPTS)
        bad = verify_sb_general(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(1.8), OPTS)
        assert good.dissipative
        assert not bad.dissipative

    def test_cb_verdicts(self):
        good = verify_cb(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(2.2), OPTS)
        bad = verify_cb(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(1.8), OPTS)
        assert good.dissipative
        assert not bad.dissipative

    def test_gain_close_to_the_truth_in_every_framework(self):
        for fw in ("sb-general", "sb-quadratic", "cb"):
            res = data_driven_gain(fw, TEMPLATE, DATA, NOISE, CONSTRAINTS, (0.5, 8.0), OPTS)
            assert 1.9 < res.gamma < 2.3, (fw, res.gamma)

    def test_direct_mode(self):
        for fw in ("sb-quadratic", "cb"):
            res = data_driven_gain(fw, TEMPLATE, DATA, NOISE, CONSTRAINTS, (0.5, 8.0), OPTS,
                                   mode="direct")
            assert 1.9 < res.gamma < 2.4, (fw, res.gamma)
        with pytest.raises(ValueError):
            data_driven_gain("sb-general", TEMPLATE, DATA, NOISE, CONSTRAINTS, (0.5, 8.0),
                             OPTS, mode="direct")

    def test_bad_selector_arguments(self):
        with pytest.raises(ValueError):
            data_driven_gain("unknown", TEMPLATE, DATA, NOISE, CONSTRAINTS, (0.5, 8.0))
        with pytest.raises(ValueError):
            data_driven_gain("cb", TEMPLATE, DATA, NOISE, CONSTRAINTS, (0.5, 8.0),
                             OPTS, mode="newton")

    def test_cb_rejects_free_polynomial_supply(self):
        sup = SupplyRate.from_poly(poly("4*u1^2 - x1^2"))
        with pytest.raises(ValueError):
            verify_cb(TEMPLATE, DATA, NOISE, CONSTRAINTS, sup, OPTS)

    def test_parametrized_storage(self):
        opts = VerifyOptions(storage_degree=2, parametrized_storage=True)
        cert = verify_sb_general(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(2.2), opts)
        assert cert.dissipative
        pts = sample_feasible_points(CONSTRAINTS, BOX, 100, rng=2)
        marg = dissipation_margin(cert, SYSTEM, pts, coeffs=A_ORACLE.ravel())
        assert marg.min() >= -1e-6

    def test_quadratic_storage_matrix(self):
        cert = verify_sb_quadratic(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(2.2), OPTS)
        p = cert.storage_matrix
        np.testing.assert_allclose(p, p.T, atol=1e-12)
        assert cert.storage_min_eig >= -1e-9
        assert cert.storage_value([0.7]) == pytest.approx(0.49 * p[0, 0], rel=1e-12)

    def test_verdict_is_monotone_in_gamma(self):
        lo = verify_cb(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(2.2), OPTS)
        hi = verify_cb(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(4.0), OPTS)
        assert lo.dissipative
        assert hi.dissipative


class TestBudgetGuards:
    def test_basis_candidate_cap(self):
        opts = VerifyOptions(storage_degree=2, max_basis_candidates=2)
        with pytest.raises(DegreeBudgetError):
            verify_model(SYSTEM, CONSTRAINTS, SupplyRate.gain(2.2), opts)

    def test_gram_block_cap(self):
        opts = VerifyOptions(storage_degree=2, max_gram_size=1)
        with pytest.raises(DegreeBudgetError):
            verify_model(SYSTEM, CONSTRAINTS, SupplyRate.gain(2.2), opts)


class TestLmiAssembly:
    def ex1_setup(self, n_samples=6):
        system = SystemModel(("x1",), ("u1",), [poly("-0.8*x1 + 0.1*x1^2 + u1")])
        template = ModelTemplate(("x1",), ("u1",), [poly("x1"), poly("x1^2"), poly("u1")])
        data = simulate(system, [0.8], lambda t: [0.1 * np.cos(0.7 * t)], n_samples,
                        noise=sb_noise(0.05), rng=np.random.default_rng(5))
        sb = SeparatelyBounded.from_dataset(data, 0.05, "absolute")
        constraints = [poly("x1^2 - 1"), poly("u1^2 - 0.01")]
        return template, data, sb, constraints

    def test_random_assignment_identity(self):
        # the assembled LMI entries are affine in the decision vector; at a
        # random assignment they must agree with the independently computed
        # sum of storage, supply, noise and region contributions
        template, data, sb, constraints = self.ex1_setup()
        supply = SupplyRate.gain(3.0)
        opts = VerifyOptions()
        prog, handles = _assemble_cb(template, data, sb, constraints, supply, opts)
        rng = np.random.default_rng(6)
        y = rng.normal(size=prog.n_vars)

        n, m, ell = template.n, template.m, template.ell
        big = n + ell + 1
        theta = handles["theta"]
        got = np.array([[prog.value(y, theta[i][j]) for j in range(big)] for i in range(big)])
        np.testing.assert_allclose(got, got.T, atol=0.0)

        pm = handles["storage_mat"]
        pval = np.array([[prog.value(y, pm[i][j]) for j in range(n)] for i in range(n)])
        tau = prog.value(y, handles["tau"])
        dual = handles["dual"]
        t_x, t_sel = handles["selectors"]

        ref = np.zeros((big, big))
        ref[:n, :n] -= pval
        ref[n:n + ell, n:n + ell] += t_x.T @ pval @ t_x
        q, s, r = supply.as_qsr(n, m)
        gmat = np.block([[q, s], [s.T, r]]) / handles["scale"]
        ref[n:n + ell, n:n + ell] += t_sel.T @ gmat @ t_sel
        idx = list(range(n, n + ell)) + list(range(n))
        ref[np.ix_(idx, idx)] += tau * dual
        zslots = list(range(n, n + ell + 1))
        for kept in handles["mults"]:
            for _, coef, g0 in kept:
                ref[np.ix_(zslots, zslots)] += prog.value(y, coef) * g0
        kmats, nus = handles["kernel"]
        for kmat, nu in zip(kmats, nus):
            ref[np.ix_(zslots, zslots)] += prog.value(y, nu) * kmat

        scale = max(1.0, float(np.max(np.abs(ref))))
        assert np.max(np.abs(got - ref)) <= 1e-8 * scale

    def test_multiplier_candidates_respect_the_cap(self):
        template, data, sb, constraints = self.ex1_setup()
        opts = VerifyOptions(tau_monomial_degree=0)
        _, handles = _assemble_cb(template, data, sb, constraints, SupplyRate.gain(3.0), opts)
        for kept in handles["mults"]:
            assert all(mono.degree == 0 for mono, _, _ in kept)
        _, handles = _assemble_cb(template, data, sb, constraints, SupplyRate.gain(3.0),
                                  VerifyOptions())
        dz = max(p.degree for p in template.z)
        for p, kept in zip(constraints, handles["mults"]):
            cap = max(2, 2 * dz - p.degree)
            assert kept
            assert all(mono.degree <= cap for mono, _, _ in kept)


class TestSoundnessUtilities:
    def test_sampled_points_satisfy_the_region(self):
        pts = sample_feasible_points(CONSTRAINTS, BOX, 100, rng=3)
        assert pts.shape == (100, 2)
        for row in pts:
            assert all(p.eval(row) <= 0.0 for p in CONSTRAINTS)

    def test_empty_region_raises(self):
        with pytest.raises(RuntimeError):
            sample_feasible_points([poly("x1^2 + 1")], BOX, 10, rng=4)

    def test_radial_sampler_stays_consistent(self):
        member = lambda a: membership_sb(a, DATA, TEMPLATE, NOISE)
        systems = sample_consistent_systems(member, A_ORACLE, 10, rng=7)
        assert len(systems) == 10
        assert all(member(a) for a in systems)
        assert any(np.linalg.norm(a - A_ORACLE) > 1e-6 for a in systems)

    def test_robust_margins_sb(self):
        cert = verify_sb_quadratic(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(2.2), OPTS)
        assert cert.dissipative
        member = lambda a: membership_sb(a, DATA, TEMPLATE, NOISE)
        pts = sample_feasible_points(CONSTRAINTS, BOX, 200, rng=8)
        for a in sample_consistent_systems(member, A_ORACLE, 10, rng=9):
            margins = dissipation_margin(cert, TEMPLATE.coefficient_model(a), pts)
            assert margins.min() >= -1e-6

    def test_robust_margins_cb(self):
        cert = verify_cb(TEMPLATE, DATA, NOISE, CONSTRAINTS, SupplyRate.gain(2.2), OPTS)
        assert cert.dissipative
        form = aggregate_noise_form(DATA, TEMPLATE,
                                    CumulativelyBounded.from_separate(NOISE, 1))
        member = lambda a: membership_cb(a, form, TEMPLATE.ell, margin=0.0)
        pts = sample_feasible_points(CONSTRAINTS, BOX, 200, rng=10)
        for a in sample_consistent_systems(member, A_ORACLE, 10, rng=11):
            margins = dissipation_margin(cert, TEMPLATE.coefficient_model(a), pts)
            assert margins.min() >= -1e-6
