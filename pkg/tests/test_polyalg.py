import math

import numpy as np
import pytest

from dissicert.polyalg import (
    ContextMismatch,
    MissingMonomial,
    Monomial,
    ParseError,
    PolyMatrix,
    Polynomial,
    VarContext,
    kron_identity,
    monomial_basis,
    parse_monomial,
    parse_polynomial,
    row_kron_identity,
    selector_matrices,
)

XU = VarContext(["x", "u"])
X = Polynomial.variable(XU, "x")
U = Polynomial.variable(XU, "u")


def random_poly(rng, ctx, max_degree=3, n_terms=5):
    terms = {}
    for _ in range(n_terms):
        exps = tuple(int(rng.integers(0, max_degree + 1)) for _ in range(len(ctx)))
        terms[Monomial(exps)] = float(rng.normal())
    return Polynomial(ctx, terms)


def coeffs_close(p, q, tol=1e-12):
    monos = set(p.terms) | set(q.terms)
    return all(abs(p.coefficient(m) - q.coefficient(m)) <= tol for m in monos)


class TestArithmetic:
    def test_add_cancellation(self):
        assert (X + 1) + (X - 1) == 2 * X

    def test_add_identity(self):
        p = X**2 + 3 * U
        assert p + Polynomial.zero(XU) == p

    def test_add_cancels_square(self):
        assert (X**2 + U) + (-(X**2)) == U

    def test_mul_difference_of_squares(self):
        assert (X + 1) * (X - 1) == X**2 - 1

    def test_mul_identity(self):
        p = 2 * X**2 - U
        assert p * Polynomial.constant(XU, 1.0) == p

    def test_square_of_sum(self):
        assert (X + U) ** 2 == X**2 + 2 * X * U + U**2

    def test_context_mismatch_is_error(self):
        other = Polynomial.variable(VarContext(["x"]), "x")
        with pytest.raises(ContextMismatch):
            _ = X + other

    def test_ring_axioms_randomized(self):
        rng = np.random.default_rng(0)
        ctx = VarContext(["x1", "x2", "u"])
        for _ in range(50):
            p = random_poly(rng, ctx)
            q = random_poly(rng, ctx)
            r = random_poly(rng, ctx)
            assert coeffs_close(p + q, q + p)
            assert coeffs_close(p * q, q * p)
            assert coeffs_close((p + q) + r, p + (q + r))
            assert coeffs_close((p * q) * r, p * (q * r), tol=1e-9)
            assert coeffs_close(p * (q + r), p * q + p * r, tol=1e-10)


class TestEval:
    def test_eval_simple(self):
        assert (X**2 - 1).eval([2.0, 0.0]) == pytest.approx(3.0)

    def test_eval_zero(self):
        assert Polynomial.zero(XU).eval([13.0, -4.0]) == 0.0

    def test_eval_three_vars(self):
        ctx = VarContext(["x1", "x2", "u"])
        p = parse_polynomial("x1*x2 + u", ctx)
        assert p.eval([1.0, 2.0, 3.0]) == pytest.approx(5.0)

    def test_eval_dimension_mismatch(self):
        with pytest.raises(ValueError):
            (X + U).eval([1.0])


class TestSubstitute:
    def test_square_binding(self):
        lam = X**2
        assert lam.substitute({"x": X + U}) == X**2 + 2 * X * U + U**2

    def test_identity_binding(self):
        p = X**3 - 2 * U
        assert p.substitute({"x": X}) == p

    def test_coefficient_variable_binding(self):
        # lambda(x) = x^2 with x -> a1*x + a2*u, expanded by hand:
        # a1^2 x^2 + 2 a1 a2 x u + a2^2 u^2
        ctx = VarContext(["x", "u", "a1", "a2"])
        x, u = Polynomial.variable(ctx, "x"), Polynomial.variable(ctx, "u")
        a1, a2 = Polynomial.variable(ctx, "a1"), Polynomial.variable(ctx, "a2")
        lam = Polynomial.variable(VarContext(["x"]), "x") ** 2
        got = lam.substitute({"x": a1 * x + a2 * u})
        assert got == a1**2 * x**2 + 2 * a1 * a2 * x * u + a2**2 * u**2

    def test_substitution_commutes_with_eval(self):
        rng = np.random.default_rng(1)
        src = VarContext(["x1", "x2"])
        tgt = VarContext(["x1", "x2", "u"])
        for _ in range(30):
            p = random_poly(rng, src, max_degree=2, n_terms=4)
            b1 = random_poly(rng, tgt, max_degree=2, n_terms=3)
            b2 = random_poly(rng, tgt, max_degree=2, n_terms=3)
            pt = rng.uniform(-1, 1, size=3)
            composed = p.substitute({"x1": b1, "x2": b2}).eval(pt)
            direct = p.eval([b1.eval(pt), b2.eval(pt)])
            assert composed == pytest.approx(direct, rel=1e-9, abs=1e-9)


class TestBasis:
    def test_two_vars_degree_two(self):
        basis = monomial_basis(XU, ["x", "u"], 2)
        assert [m.exps for m in basis] == [
            (0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2),
        ]

    def test_degree_zero(self):
        assert monomial_basis(XU, ["x", "u"], 0) == [Monomial((0, 0))]

    def test_three_vars_degree_three(self):
        ctx = VarContext(["x1", "x2", "u"])
        assert len(monomial_basis(ctx, ctx.names, 3)) == 20

    def test_counts(self):
        for k in range(1, 5):
            ctx = VarContext([f"v{i}" for i in range(k)])
            for d in range(7):
                assert len(monomial_basis(ctx, ctx.names, d)) == math.comb(k + d, d)

    def test_subset_of_variables(self):
        ctx = VarContext(["x", "u"])
        basis = monomial_basis(ctx, ["x"], 2)
        assert [m.exps for m in basis] == [(0, 0), (1, 0), (2, 0)]


class TestKronForms:
    def test_single_monomial_diag(self):
        m = kron_identity([X], 2)
        assert m.shape == (2, 2)
        assert m[0, 0] == X and m[1, 1] == X
        assert m[0, 1].is_zero() and m[1, 0].is_zero()

    def test_row_form_n1(self):
        m = row_kron_identity([X, U], 1)
        assert m.shape == (1, 2)
        assert m[0, 0] == X and m[0, 1] == U

    def test_row_form_n2(self):
        m = row_kron_identity([X, U], 2)
        assert m.shape == (2, 4)
        expect = [[X, U, None, None], [None, None, X, U]]
        for i in range(2):
            for j in range(4):
                if expect[i][j] is None:
                    assert m[i, j].is_zero()
                else:
                    assert m[i, j] == expect[i][j]

    def test_gram_reconstruction_shape(self):
        z = [Polynomial.constant(XU, 1.0), X, U]
        zi = kron_identity(z, 3)
        assert zi.shape == (9, 3)


class TestSelectors:
    def test_minimal_template(self):
        t_x, t = selector_matrices([X, U], ["x"], ["u"])
        np.testing.assert_array_equal(t_x, [[1.0, 0.0]])
        np.testing.assert_array_equal(t, np.eye(2))

    def test_larger_template(self):
        ctx = VarContext(["x1", "x2", "u"])
        z = [
            Polynomial.variable(ctx, "x1"),
            Polynomial.variable(ctx, "x2"),
            Polynomial.variable(ctx, "x1") ** 2,
            Polynomial.variable(ctx, "u"),
        ]
        t_x, t = selector_matrices(z, ["x1", "x2"], ["u"])
        np.testing.assert_array_equal(t_x, [[1, 0, 0, 0], [0, 1, 0, 0]])
        np.testing.assert_array_equal(t, [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1]])

    def test_missing_state_monomial(self):
        with pytest.raises(MissingMonomial):
            selector_matrices([X**2, U], ["x"], ["u"])

    def test_selector_identities_exact(self):
        ctx = VarContext(["x1", "x2", "u"])
        names = ["x1", "x2", "x1^2", "x2^2", "x1*x2", "x1^3", "u"]
        z = [
            Polynomial.from_monomial(ctx, parse_monomial(s, ctx)) for s in names
        ]
        t_x, t = selector_matrices(z, ["x1", "x2"], ["u"])
        # x - T_x z and [x;u] - T z must vanish as exact polynomial identities
        for i, name in enumerate(["x1", "x2"]):
            acc = Polynomial.variable(ctx, name)
            for k in range(len(z)):
                acc = acc - t_x[i, k] * z[k]
            assert acc.is_zero()
        for i, name in enumerate(["x1", "x2", "u"]):
            acc = Polynomial.variable(ctx, name)
            for k in range(len(z)):
                acc = acc - t[i, k] * z[k]
            assert acc.is_zero()


class TestPolyMatrix:
    def test_matmul_and_transpose(self):
        a = PolyMatrix([[X, U], [U, X]])
        b = a.matmul(a.transpose())
        assert b[0, 0] == X**2 + U**2
        assert b[0, 1] == 2 * X * U

    def test_eval(self):
        a = PolyMatrix([[X, U], [U, X]])
        np.testing.assert_allclose(a.eval([2.0, 3.0]), [[2, 3], [3, 2]])

    def test_symmetry_check(self):
        assert PolyMatrix([[X, U], [U, X]]).is_symmetric()
        assert not PolyMatrix([[X, U], [X * U, X]]).is_symmetric()


class TestParser:
    def test_spec_style_string(self):
        ctx = VarContext(["x1", "u1"])
        p = parse_polynomial("-0.8*x1 + 0.1*x1^2 + u1", ctx)
        x1 = Polynomial.variable(ctx, "x1")
        u1 = Polynomial.variable(ctx, "u1")
        assert p == -0.8 * x1 + 0.1 * x1**2 + u1

    def test_implicit_multiplication_rejected(self):
        with pytest.raises(ParseError) as err:
            parse_polynomial("2x", VarContext(["x"]))
        assert "implicit" in str(err.value)

    def test_unknown_variable_has_position(self):
        with pytest.raises(ParseError) as err:
            parse_polynomial("x +\n y", VarContext(["x"]))
        assert err.value.line == 2
        assert err.value.col == 2

    def test_parentheses(self):
        p = parse_polynomial("(x + u)^2", XU)
        assert p == X**2 + 2 * X * U + U**2

    def test_monomial_parse(self):
        mono = parse_monomial("x^2", XU)
        assert mono.exps == (2, 0)
        with pytest.raises(ParseError):
            parse_monomial("2*x", XU)
        with pytest.raises(ParseError):
            parse_monomial("x + u", XU)

    def test_roundtrip_repr(self):
        rng = np.random.default_rng(7)
        ctx = VarContext(["x1", "x2", "u"])
        for _ in range(20):
            p = random_poly(rng, ctx)
            assert coeffs_close(parse_polynomial(repr(p), ctx), p, tol=1e-6)
