import os

import numpy as np
import pytest

from dissicert.polyalg import VarContext, parse_polynomial
from dissicert.sysdata import (
    ConstraintSet,
    CumulativelyBounded,
    DataConsistencyError,
    DataSet,
    DivergenceError,
    ModelTemplate,
    NotRepresentable,
    QuadraticallyBounded,
    SeparatelyBounded,
    SystemModel,
    aggregate_noise_form,
    constraint_to_quadratic,
    dual_noise_form,
    membership_cb,
    membership_cb_dual,
    membership_sb,
    sample_noise_forms,
    sb_noise,
    simulate,
)

CTX = VarContext(["x1", "x2", "u1"])


def poly(s):
    return parse_polynomial(s, CTX)


def two_state_system():
    f = [poly("-0.5*x1 + 0.3*x2^2 + 0.2*x1*x2"), poly("0.4*x2 + 0.1*x2^2 + u1")]
    return SystemModel(("x1", "x2"), ("u1",), f)


def two_state_template():
    z = [poly(s) for s in ["x1", "x2", "x2^2", "x1*x2", "u1"]]
    return ModelTemplate(("x1", "x2"), ("u1",), z)


A_TRUE = np.array([[-0.5, 0.0, 0.3, 0.2, 0.0], [0.0, 0.4, 0.1, 0.0, 1.0]])


def random_records(rng, d, template):
    xs = rng.normal(size=(d, template.n))
    us = rng.normal(size=(d, template.m))
    xps = rng.normal(size=(d, template.n))
    return DataSet(xs, us, xps)


class TestDataSet:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            DataSet(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            DataSet(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros((3, 1)))

    def test_prefix(self):
        rng = np.random.default_rng(0)
        data = random_records(rng, 10, two_state_template())
        head = data.prefix(4)
        assert head.n_samples == 4
        np.testing.assert_array_equal(head.x, data.x[:4])
        np.testing.assert_array_equal(head.xp, data.xp[:4])
        with pytest.raises(ValueError):
            data.prefix(11)

    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        data = random_records(rng, 7, two_state_template())
        path = os.path.join(tmp_path, "records.csv")
        data.to_csv(path)
        back = DataSet.from_csv(path)
        np.testing.assert_allclose(back.x, data.x, atol=1e-15)
        np.testing.assert_allclose(back.u, data.u, atol=1e-15)
        np.testing.assert_allclose(back.xp, data.xp, atol=1e-15)


class TestSimulate:
    def u_fn(self, t):
        return np.array([0.5 * np.sin(0.1 * t)])

    def test_deterministic_under_seed(self):
        system = two_state_system()
        d1 = simulate(system, [-1.0, -1.0], self.u_fn, 40,
                      noise=sb_noise(0.02), rng=np.random.default_rng(3))
        d2 = simulate(system, [-1.0, -1.0], self.u_fn, 40,
                      noise=sb_noise(0.02), rng=np.random.default_rng(3))
        np.testing.assert_array_equal(d1.x, d2.x)
        np.testing.assert_array_equal(d1.xp, d2.xp)

    def test_truth_is_consistent_absolute(self):
        system = two_state_system()
        data = simulate(system, [-1.0, -1.0], self.u_fn, 40,
                        noise=sb_noise(0.02), rng=np.random.default_rng(3))
        sb = SeparatelyBounded.from_dataset(data, 0.02, "absolute")
        assert membership_sb(A_TRUE, data, two_state_template(), sb, margin=1e-12)

    def test_truth_is_consistent_relative(self):
        system = two_state_system()
        data = simulate(system, [-1.0, -1.0], self.u_fn, 40,
                        noise=sb_noise(0.02, "relative"), rng=np.random.default_rng(3))
        sb = SeparatelyBounded.from_dataset(data, 0.02, "relative")
        np.testing.assert_allclose(sb.eps, 0.02 * np.linalg.norm(data.x, axis=1))
        assert membership_sb(A_TRUE, data, two_state_template(), sb, margin=1e-12)

    def test_array_inputs_and_noise(self):
        system = two_state_system()
        us = np.zeros((5, 1))
        ds = 0.01 * np.ones((5, 2))
        data = simulate(system, [0.5, 0.5], us, 5, noise=ds)
        x = np.array([0.5, 0.5])
        for t in range(5):
            np.testing.assert_allclose(data.x[t], x, atol=1e-14)
            x = system.step(x, us[t]) + ds[t]
            np.testing.assert_allclose(data.xp[t], x, atol=1e-14)

    def test_divergence_guard(self):
        ctx = VarContext(["x1", "u1"])
        system = SystemModel(("x1",), ("u1",), [parse_polynomial("x1^2", ctx)])
        with pytest.raises(DivergenceError):
            simulate(system, [2.0], lambda t: [0.0], 10, guard=1e3)


class TestSampleForms:
    def test_form_evaluates_residual_bound(self):
        rng = np.random.default_rng(7)
        template = two_state_template()
        data = random_records(rng, 6, template)
        sb = SeparatelyBounded(np.linspace(0.1, 0.4, 6))
        forms = sample_noise_forms(data, template, sb)
        for _ in range(5):
            a = rng.normal(size=(2, template.ell))
            v = np.concatenate([a.reshape(-1), [1.0]])
            for i, q in enumerate(forms):
                d = data.xp[i] - a @ template.z_eval(data.x[i], data.u[i])
                want = float(d @ d) - sb.eps[i] ** 2
                assert abs(float(v @ q @ v) - want) <= 1e-10

    def test_quadratic_bound_matches_norm_bound(self):
        rng = np.random.default_rng(8)
        template = two_state_template()
        data = random_records(rng, 5, template)
        sb = SeparatelyBounded(np.linspace(0.2, 0.5, 5))
        qb = QuadraticallyBounded.from_separate(sb, 2)
        for q1, q2 in zip(sample_noise_forms(data, template, sb),
                          sample_noise_forms(data, template, qb)):
            np.testing.assert_allclose(q1, q2, atol=1e-14)

    def test_bound_count_mismatch(self):
        rng = np.random.default_rng(9)
        template = two_state_template()
        data = random_records(rng, 5, template)
        with pytest.raises(DataConsistencyError):
            sample_noise_forms(data, template, SeparatelyBounded(np.ones(3)))

    def test_indefinite_quadratic_part_rejected(self):
        qb = QuadraticallyBounded(-np.eye(2), np.zeros(2), -1.0)
        with pytest.raises(DataConsistencyError):
            qb.sample_form(0, 2)


class TestAggregateForm:
    def test_congruence_with_noise_residual(self):
        # [A^T; I]^T F [A^T; I] must equal the cumulative bound evaluated at
        # the residual matrix X+ - A Z, for any A
        rng = np.random.default_rng(11)
        template = two_state_template()
        for _ in range(5):
            d = int(rng.integers(6, 12))
            data = random_records(rng, d, template)
            m1 = rng.normal(size=(d, d))
            m1 = m1 @ m1.T + d * np.eye(d)
            m2 = rng.normal(size=(d, 2))
            m3 = rng.normal(size=(2, 2))
            m3 = 0.5 * (m3 + m3.T)
            form = aggregate_noise_form(data, template, CumulativelyBounded(m1, m2, m3))
            zmat = template.z_eval_batch(data.x, data.u).T
            a = rng.normal(size=(2, template.ell))
            resid = data.xp.T - a @ zmat
            stack_a = np.vstack([a.T, np.eye(2)])
            stack_d = np.vstack([resid.T, np.eye(2)])
            big = np.block([[m1, m2], [m2.T, m3]])
            lhs = stack_a.T @ form @ stack_a
            rhs = stack_d.T @ big @ stack_d
            scale = max(1.0, float(np.max(np.abs(rhs))))
            assert np.max(np.abs(lhs - rhs)) <= 1e-9 * scale

    def test_sample_count_mismatch(self):
        rng = np.random.default_rng(12)
        template = two_state_template()
        data = random_records(rng, 5, template)
        cb = CumulativelyBounded.from_separate(SeparatelyBounded(np.ones(4)), 2)
        with pytest.raises(DataConsistencyError):
            aggregate_noise_form(data, template, cb)

    def test_from_separate_shape(self):
        sb = SeparatelyBounded(np.array([0.1, 0.2, 0.3]))
        cb = CumulativelyBounded.from_separate(sb, 2)
        np.testing.assert_allclose(cb.m1, np.eye(3))
        np.testing.assert_allclose(cb.m2, np.zeros((3, 2)))
        np.testing.assert_allclose(cb.m3, -float(np.sum(sb.eps**2)) * np.eye(2))
        assert cb.n_samples == 3

    def test_m1_must_be_psd(self):
        with pytest.raises(ValueError):
            CumulativelyBounded(-np.eye(3), np.zeros((3, 2)), np.zeros((2, 2)))


class TestDualForm:
    def test_scalar_closed_form(self):
        # one record (x=1, u=0, x+=1), dictionary z=[x]: consistency of the
        # scalar coefficient a reads (a-1)^2 <= eps^2 on both sides of the map
        ctx = VarContext(["x", "u"])
        template = ModelTemplate(("x",), ("u",), [parse_polynomial("x", ctx)])
        data = DataSet([[1.0]], [[0.0]], [[1.0]])
        eps = 0.3
        cb = CumulativelyBounded(np.eye(1), np.zeros((1, 1)), -(eps**2) * np.eye(1))
        form = aggregate_noise_form(data, template, cb)
        np.testing.assert_allclose(form, [[1.0, -1.0], [-1.0, 1.0 - eps**2]], atol=1e-14)
        dual = dual_noise_form(form, ell=1)
        for a in [0.8, 1.0, 1.25, 1.3001]:
            v = np.array([1.0, a])
            got = float(v @ dual @ v)
            want = ((a - 1.0) ** 2 - eps**2) / eps**2
            assert got == pytest.approx(want, abs=1e-12)
            inside = (a - 1.0) ** 2 - eps**2 < -1e-8
            assert membership_cb(np.array([[a]]), form, 1) == inside
            assert membership_cb_dual(np.array([[a]]), dual, 1) == inside

    def test_involution(self):
        rng = np.random.default_rng(13)
        template = two_state_template()
        data = random_records(rng, 8, template)
        m1 = rng.normal(size=(8, 8))
        m1 = m1 @ m1.T + 8 * np.eye(8)
        cb = CumulativelyBounded(m1, rng.normal(size=(8, 2)), -np.eye(2))
        form = aggregate_noise_form(data, template, cb)
        with np.testing.suppress_warnings() as sup:
            sup.filter(RuntimeWarning)
            dual = dual_noise_form(form, template.ell, require_psd_corner=False)
            back = dual_noise_form(dual, template.ell, require_psd_corner=False)
        scale = max(1.0, float(np.max(np.abs(form))))
        assert np.max(np.abs(back - form)) <= 1e-8 * scale

    def test_membership_agrees_on_both_sides(self):
        # sampled equivalence of the two set descriptions, away from the border
        system = two_state_system()
        template = two_state_template()
        data = simulate(system, [-1.0, -1.0], lambda t: [0.5 * np.sin(0.1 * t)], 40,
                        noise=sb_noise(0.05), rng=np.random.default_rng(14))
        sb = SeparatelyBounded.from_dataset(data, 0.05, "absolute")
        cb = CumulativelyBounded.from_separate(sb, 2)
        form = aggregate_noise_form(data, template, cb)
        dual = dual_noise_form(form, template.ell)
        rng = np.random.default_rng(15)
        checked = 0
        for _ in range(200):
            a = A_TRUE + rng.normal(scale=rng.choice([1e-3, 1e-2, 0.1, 1.0]),
                                    size=A_TRUE.shape)
            stack = np.vstack([a.T, np.eye(2)])
            val = stack.T @ form @ stack
            lam = float(np.linalg.eigvalsh(0.5 * (val + val.T))[-1])
            if abs(lam) < 1e-6:
                continue
            checked += 1
            assert membership_cb(a, form, template.ell) == membership_cb_dual(a, dual, template.ell)
        assert checked >= 150

    def test_truth_in_aggregate_set(self):
        system = two_state_system()
        template = two_state_template()
        data = simulate(system, [-1.0, -1.0], lambda t: [0.5 * np.sin(0.1 * t)], 40,
                        noise=sb_noise(0.02), rng=np.random.default_rng(16))
        sb = SeparatelyBounded.from_dataset(data, 0.02, "absolute")
        form = aggregate_noise_form(data, template, CumulativelyBounded.from_separate(sb, 2))
        assert membership_cb(A_TRUE, form, template.ell, margin=0.0)

    def test_rank_deficient_data_raises(self):
        # two samples cannot pin five dictionary coefficients
        rng = np.random.default_rng(17)
        template = two_state_template()
        data = random_records(rng, 2, template)
        cb = CumulativelyBounded.from_separate(SeparatelyBounded(np.full(2, 0.1)), 2)
        form = aggregate_noise_form(data, template, cb)
        with pytest.raises(DataConsistencyError):
            dual_noise_form(form, template.ell)


class TestMembershipSb:
    def test_exact_fit_and_margin(self):
        template = two_state_template()
        rng = np.random.default_rng(18)
        xs = rng.normal(size=(6, 2))
        us = rng.normal(size=(6, 1))
        zmat = template.z_eval_batch(xs, us)
        xps = zmat @ A_TRUE.T
        data = DataSet(xs, us, xps)
        tight = SeparatelyBounded(np.full(6, 1e-12))
        assert membership_sb(A_TRUE, data, template, tight)
        off = A_TRUE.copy()
        off[0, 0] += 0.05
        assert not membership_sb(off, data, template, tight)
        wide = SeparatelyBounded(np.full(6, 1.0))
        assert membership_sb(off, data, template, wide)


class TestConstraintQuadratic:
    def test_round_trip_on_samples(self):
        template = two_state_template()
        p = poly("x1^2 + x2^2 - 1")
        p0, kernel = constraint_to_quadratic(p, template)
        rng = np.random.default_rng(19)
        for _ in range(50):
            pt = rng.normal(size=3)
            zeta = np.concatenate([template.z_eval(pt[:2], pt[2:]), [1.0]])
            assert float(zeta @ p0 @ zeta) == pytest.approx(p.eval(pt), abs=1e-9)
            for k in kernel:
                assert float(zeta @ k @ zeta) == pytest.approx(0.0, abs=1e-9)

    def test_kernel_spans_product_collisions(self):
        # x1*x2 appears both as a dictionary entry times one and as the
        # product of two entries, so the representation has free directions
        template = two_state_template()
        _, kernel = constraint_to_quadratic(poly("x1*x2"), template)
        assert len(kernel) >= 1

    def test_not_representable(self):
        template = two_state_template()
        with pytest.raises(NotRepresentable):
            constraint_to_quadratic(poly("x1^5"), template)


class TestConstraintSet:
    def region(self):
        polys = [poly("x1^2 - 1"), poly("x2^2 - 1"), poly("u1^2 - 0.25")]
        return ConstraintSet(polys)

    def test_contains(self):
        cset = self.region()
        assert cset.contains(np.array([0.5, -0.5, 0.1]))
        assert not cset.contains(np.array([1.5, 0.0, 0.0]))
        assert len(cset) == 3

    def test_find_witness(self):
        cset = self.region()
        box = np.array([[-2.0, 2.0], [-2.0, 2.0], [-2.0, 2.0]])
        w = cset.find_witness(box, n_draws=2000, rng=np.random.default_rng(0))
        assert w is not None
        assert cset.contains(w)

    def test_empty_region_has_no_witness(self):
        cset = ConstraintSet([poly("x1^2 + 1")])
        box = np.array([[-2.0, 2.0], [-2.0, 2.0], [-2.0, 2.0]])
        assert cset.find_witness(box, n_draws=300, rng=np.random.default_rng(1)) is None
