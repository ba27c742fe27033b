"""System templates, experiment data, noise descriptions, and consistency sets.

A system is a polynomial state-update map x+ = f(x, u). A template fixes a
dictionary z(x, u) of basis polynomials so that every candidate explanation of
the data has the form f = A z for a coefficient matrix A (n x ell). Data is a
batch of samples (x_i, u_i, x_i+) whose successors were corrupted by additive
noise, and a noise description bounds that corruption either sample by sample
(norm balls or quadratic forms in each d_i) or cumulatively (one quadratic
form over the whole noise matrix).

This module turns those descriptions into the numeric forms the verification
engines consume: one quadratic form Q_i in the stacked coefficient vector per
sample, or an aggregate form over the coefficient matrix together with its
dual (inverse) representation.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .polyalg import Polynomial, VarContext


class DivergenceError(RuntimeError):
    """Simulation state escaped the guard region."""


class NotRepresentable(ValueError):
    """A polynomial has no representation in the requested quadratic form."""


class DataConsistencyError(ValueError):
    """The data and noise description cannot be combined as requested."""


def _state_input_ctx(state_names, input_names) -> VarContext:
    return VarContext(tuple(state_names) + tuple(input_names))


@dataclass
class SystemModel:
    """Known polynomial dynamics x+ = f(x, u)."""

    state_names: tuple[str, ...]
    input_names: tuple[str, ...]
    f: list[Polynomial]

    def __post_init__(self):
        self.state_names = tuple(self.state_names)
        self.input_names = tuple(self.input_names)
        if len(self.f) != len(self.state_names):
            raise ValueError("one update polynomial per state is required")
        ctx = self.ctx
        for p in self.f:
            if tuple(p.ctx.names) != tuple(ctx.names):
                raise ValueError("update polynomials must live in the (states, inputs) context")

    @property
    def ctx(self) -> VarContext:
        return self.f[0].ctx if self.f else _state_input_ctx(self.state_names, self.input_names)

    @property
    def n(self) -> int:
        return len(self.state_names)

    @property
    def m(self) -> int:
        return len(self.input_names)

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        pt = np.concatenate([np.atleast_1d(x), np.atleast_1d(u)])
        return np.array([p.eval(pt) for p in self.f])


@dataclass
class ModelTemplate:
    """Dictionary z(x, u) spanning the candidate dynamics f = A z."""

    state_names: tuple[str, ...]
    input_names: tuple[str, ...]
    z: list[Polynomial]

    def __post_init__(self):
        self.state_names = tuple(self.state_names)
        self.input_names = tuple(self.input_names)
        if not self.z:
            raise ValueError("template needs at least one dictionary entry")
        names = tuple(self.z[0].ctx.names)
        if names != tuple(self.state_names) + tuple(self.input_names):
            raise ValueError("dictionary entries must live in the (states, inputs) context")
        for p in self.z:
            if tuple(p.ctx.names) != names:
                raise ValueError("dictionary entries share one context")

    @property
    def ctx(self) -> VarContext:
        return self.z[0].ctx

    @property
    def n(self) -> int:
        return len(self.state_names)

    @property
    def m(self) -> int:
        return len(self.input_names)

    @property
    def ell(self) -> int:
        return len(self.z)

    def z_eval(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        pt = np.concatenate([np.atleast_1d(x), np.atleast_1d(u)])
        return np.array([p.eval(pt) for p in self.z])

    def z_eval_batch(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        return np.array([self.z_eval(x, u) for x, u in zip(xs, us)])

    def coefficient_model(self, a: np.ndarray) -> SystemModel:
        a = np.asarray(a, dtype=float)
        if a.shape != (self.n, self.ell):
            raise ValueError(f"coefficient matrix must be {self.n} x {self.ell}")
        f = []
        for i in range(self.n):
            p = Polynomial.zero(self.ctx)
            for j, zj in enumerate(self.z):
                if a[i, j]:
                    p = p + float(a[i, j]) * zj
            f.append(p)
        return SystemModel(self.state_names, self.input_names, f)

    def stacked_row_basis(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Z(x, u) = I_n (kron) z^T, so that f(x, u) = Z(x, u) vec(A rows)."""
        return np.kron(np.eye(self.n), self.z_eval(x, u)[None, :])


@dataclass
class DataSet:
    """Samples (x_i, u_i, x_i+) collected from one or more experiments."""

    x: np.ndarray
    u: np.ndarray
    xp: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.xp = np.atleast_2d(np.asarray(self.xp, dtype=float))
        if self.x.shape != self.xp.shape:
            raise ValueError("state and successor arrays must have matching shape")
        if self.u.shape[0] != self.x.shape[0]:
            raise ValueError("one input row per sample is required")

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    def prefix(self, d: int) -> "DataSet":
        if not 1 <= d <= self.n_samples:
            raise ValueError(f"prefix length must be in 1..{self.n_samples}")
        return DataSet(self.x[:d].copy(), self.u[:d].copy(), self.xp[:d].copy())

    def to_csv(self, path: str) -> None:
        header = (
            [f"x{i + 1}" for i in range(self.n)]
            + [f"u{i + 1}" for i in range(self.m)]
            + [f"xp{i + 1}" for i in range(self.n)]
        )
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(self.n_samples):
                row = list(self.x[i]) + list(self.u[i]) + list(self.xp[i])
                w.writerow([f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path: str) -> "DataSet":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            n = sum(1 for h in header if h.startswith("x") and not h.startswith("xp"))
            m = sum(1 for h in header if h.startswith("u"))
            np_ = sum(1 for h in header if h.startswith("xp"))
            expected = (
                [f"x{i + 1}" for i in range(n)]
                + [f"u{i + 1}" for i in range(m)]
                + [f"xp{i + 1}" for i in range(np_)]
            )
            if n == 0 or np_ != n or header != expected:
                raise ValueError(f"unrecognized data header: {header}")
            rows = [[float(v) for v in row] for row in reader if row]
        arr = np.asarray(rows, dtype=float)
        if arr.size == 0:
            raise ValueError("data file has no samples")
        return cls(arr[:, :n], arr[:, n : n + m], arr[:, n + m :])


# ----- noise descriptions --------------------------------------------------------


@dataclass
class SeparatelyBounded:
    """Per-sample norm bounds: the i-th noise vector satisfies ||d_i||_2 <= eps[i]."""

    eps: np.ndarray

    def __post_init__(self):
        self.eps = np.atleast_1d(np.asarray(self.eps, dtype=float))
        if np.any(self.eps < 0):
            raise ValueError("noise bounds must be nonnegative")

    @classmethod
    def from_dataset(cls, data: DataSet, magnitude: float, mode: str = "absolute") -> "SeparatelyBounded":
        if mode == "absolute":
            return cls(np.full(data.n_samples, float(magnitude)))
        if mode == "relative":
            return cls(float(magnitude) * np.linalg.norm(data.x, axis=1))
        raise ValueError(f"unknown noise mode {mode!r} (expected 'absolute' or 'relative')")

    def bound_for(self, i: int) -> float:
        return float(self.eps[i if self.eps.size > 1 else 0])


@dataclass
class QuadraticallyBounded:
    """Per-sample quadratic bounds d^T D1 d + 2 D2^T d + D3 <= 0.

    Arrays may carry a leading sample axis to vary per sample; without it the
    same form applies to every sample. D1 must be positive definite so each
    sample's noise set is a bounded ellipsoid.
    """

    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray

    def __post_init__(self):
        self.d1 = np.asarray(self.d1, dtype=float)
        self.d2 = np.asarray(self.d2, dtype=float)
        self.d3 = np.asarray(self.d3, dtype=float)

    @classmethod
    def from_separate(cls, sb: SeparatelyBounded, n: int) -> "QuadraticallyBounded":
        d = sb.eps.shape[0]
        d1 = np.broadcast_to(np.eye(n), (d, n, n)).copy()
        d2 = np.zeros((d, n))
        d3 = -(sb.eps**2)
        return cls(d1, d2, d3)

    def sample_form(self, i: int, n: int) -> tuple[np.ndarray, np.ndarray, float]:
        d1 = self.d1 if self.d1.ndim == 2 else self.d1[i]
        d2 = self.d2 if self.d2.ndim == 1 else self.d2[i]
        d3 = self.d3 if self.d3.ndim == 0 else self.d3[i]
        d1 = np.asarray(d1, dtype=float).reshape(n, n)
        d2 = np.asarray(d2, dtype=float).reshape(n)
        lam = np.linalg.eigvalsh(0.5 * (d1 + d1.T))[0]
        if lam <= 0:
            raise DataConsistencyError("per-sample noise form needs positive definite quadratic part")
        return d1, d2, float(d3)


@dataclass
class CumulativelyBounded:
    """One bound on the whole noise matrix: [Dm^T; I]^T M [Dm^T; I] <= 0.

    M = [[m1, m2], [m2^T, m3]] with m1 (D x D) PSD, m2 (D x n), m3 (n x n),
    where Dm is the n x D matrix of stacked noise vectors.
    """

    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray

    def __post_init__(self):
        self.m1 = np.asarray(self.m1, dtype=float)
        self.m2 = np.asarray(self.m2, dtype=float)
        self.m3 = np.asarray(self.m3, dtype=float)
        if self.m1.ndim != 2 or self.m1.shape[0] != self.m1.shape[1]:
            raise ValueError("m1 must be square (one row per sample)")
        if self.m2.shape[0] != self.m1.shape[0]:
            raise ValueError("m2 must have one row per sample")
        lam = float(np.linalg.eigvalsh(0.5 * (self.m1 + self.m1.T))[0])
        if lam < -1e-10:
            raise ValueError(f"m1 must be positive semidefinite (min eig {lam:.3e})")

    @classmethod
    def from_separate(cls, sb: SeparatelyBounded, n: int) -> "CumulativelyBounded":
        d = sb.eps.shape[0]
        total = float(np.sum(sb.eps**2))
        return cls(np.eye(d), np.zeros((d, n)), -total * np.eye(n))

    @property
    def n_samples(self) -> int:
        return self.m1.shape[0]


# ----- simulation ----------------------------------------------------------------


def draw_in_ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    """Uniform draw from the closed 2-norm ball by rejection from its box."""
    if radius == 0.0:
        return np.zeros(n)
    while True:
        d = rng.uniform(-radius, radius, size=n)
        if float(d @ d) <= radius * radius:
            return d


def sb_noise(magnitude: float, mode: str = "absolute"):
    """Noise generator for :func:`simulate` honoring a per-sample norm bound."""
    if mode not in ("absolute", "relative"):
        raise ValueError(f"unknown noise mode {mode!r}")

    def gen(rng: np.random.Generator, x: np.ndarray, t: int) -> np.ndarray:
        radius = magnitude if mode == "absolute" else magnitude * float(np.linalg.norm(x))
        return draw_in_ball(rng, x.shape[0], radius)

    return gen


def simulate(
    system: SystemModel,
    x0,
    inputs,
    n_steps: int,
    *,
    noise=None,
    rng: np.random.Generator | None = None,
    guard: float = 1e6,
) -> DataSet:
    """Roll the system forward, recording (x_t, u_t, x_{t+1}) with noisy successors.

    Noise enters the dynamics: the next state is f(x_t, u_t) + d_t and the
    recorded successor is that same noisy state. ``inputs`` is either an array
    of shape (n_steps, m) or a callable t -> u_t; ``noise`` is None, an array
    of shape (n_steps, n), or a callable (rng, x_t, t) -> d_t.
    """
    x = np.asarray(x0, dtype=float).reshape(system.n)
    if rng is None:
        rng = np.random.default_rng()
    xs = np.zeros((n_steps, system.n))
    us = np.zeros((n_steps, system.m))
    xps = np.zeros((n_steps, system.n))
    for t in range(n_steps):
        if callable(inputs):
            u = np.asarray(inputs(t), dtype=float).reshape(system.m)
        else:
            u = np.asarray(inputs[t], dtype=float).reshape(system.m)
        if callable(noise):
            d = np.asarray(noise(rng, x, t), dtype=float).reshape(system.n)
        elif noise is not None:
            d = np.asarray(noise[t], dtype=float).reshape(system.n)
        else:
            d = np.zeros(system.n)
        xp = system.step(x, u) + d
        if not np.all(np.isfinite(xp)) or np.max(np.abs(xp)) > guard:
            raise DivergenceError(f"state left the guard region at step {t}")
        xs[t] = x
        us[t] = u
        xps[t] = xp
        x = xp
    return DataSet(xs, us, xps)


# ----- consistency-set constructions ---------------------------------------------


def sample_noise_forms(
    data: DataSet, template: ModelTemplate, noise: SeparatelyBounded | QuadraticallyBounded
) -> list[np.ndarray]:
    """Quadratic forms Q_i in (vec A, 1) encoding sample-wise data consistency.

    For each sample, membership of A in the consistency set is
    [a; 1]^T Q_i [a; 1] <= 0 with a = vec(A rows): the form evaluates the
    sample's noise bound at d = x_i+ - Z_i a.
    """
    n = data.n
    if isinstance(noise, SeparatelyBounded):
        if noise.eps.size not in (1, data.n_samples):
            raise DataConsistencyError("one noise bound per sample is required")
        noise = QuadraticallyBounded.from_separate(
            SeparatelyBounded(np.broadcast_to(noise.eps, (data.n_samples,)).copy()), n
        )
    out = []
    for i in range(data.n_samples):
        d1, d2, d3 = noise.sample_form(i, n)
        zi = template.stacked_row_basis(data.x[i], data.u[i])
        xpi = data.xp[i]
        top_left = zi.T @ d1 @ zi
        top_right = -zi.T @ (d1 @ xpi + d2)
        corner = float(xpi @ d1 @ xpi + 2.0 * (d2 @ xpi) + d3)
        q = np.zeros((zi.shape[1] + 1, zi.shape[1] + 1))
        q[:-1, :-1] = top_left
        q[:-1, -1] = top_right
        q[-1, :-1] = top_right
        q[-1, -1] = corner
        out.append(q)
    return out


def aggregate_noise_form(data: DataSet, template: ModelTemplate, noise: CumulativelyBounded) -> np.ndarray:
    """Consistency of the whole batch as one quadratic form in (A^T, I).

    Returns the (ell + n) x (ell + n) symmetric matrix F with
    A consistent  <=>  [A^T; I]^T F [A^T; I] < 0 (strictly, up to the caller's
    margin). Built from the dictionary matrix Z (ell x D), the successor
    matrix X+ (n x D), and the cumulative noise form.
    """
    if noise.n_samples != data.n_samples:
        raise DataConsistencyError(
            f"noise form covers {noise.n_samples} samples but the data has {data.n_samples}"
        )
    zmat = template.z_eval_batch(data.x, data.u).T  # ell x D
    xpm = data.xp.T  # n x D
    f11 = zmat @ noise.m1 @ zmat.T
    f12 = -zmat @ (noise.m1 @ xpm.T + noise.m2)
    stack = np.vstack([xpm.T, np.eye(data.n)])
    big = np.block([[noise.m1, noise.m2], [noise.m2.T, noise.m3]])
    f22 = stack.T @ big @ stack
    out = np.zeros((template.ell + data.n, template.ell + data.n))
    out[: template.ell, : template.ell] = f11
    out[: template.ell, template.ell :] = f12
    out[template.ell :, : template.ell] = f12.T
    out[template.ell :, template.ell :] = f22
    return 0.5 * (out + out.T)


def dual_noise_form(form: np.ndarray, ell: int, require_psd_corner: bool = True) -> np.ndarray:
    """Inverse-form representation of an aggregate consistency set.

    With F = [[F1, F2], [F2^T, F3]] partitioned at ell, returns
    G = [[-F1, F2], [F2^T, -F3]]^{-1}, whose partition G = [[G1, G2],
    [G2^T, G3]] describes the same coefficient matrices via
    [I; A]^T G [I; A] < 0. Applying the map twice recovers the input.

    Consistent data forces G3 to be positive semidefinite; a clearly negative
    eigenvalue there means no dynamics in the template explains the data,
    which raises unless ``require_psd_corner`` is disabled.
    """
    form = np.asarray(form, dtype=float)
    k = form.shape[0]
    n = k - ell
    flip = form.copy()
    flip[:ell, :ell] *= -1.0
    flip[ell:, ell:] *= -1.0
    singular = not np.all(np.isfinite(flip))
    if not singular:
        try:
            inv = np.linalg.inv(flip)
            singular = not np.all(np.isfinite(inv)) or np.linalg.cond(flip) > 1e13
        except np.linalg.LinAlgError:
            singular = True
    if singular:
        raise DataConsistencyError(
            "aggregate consistency form is singular and cannot be inverted; this typically "
            "means the dictionary matrix lacks full row rank (fewer samples than dictionary "
            "entries, or insufficiently rich data)"
        )
    inv = 0.5 * (inv + inv.T)
    g3 = inv[ell:, ell:]
    lam3 = float(np.linalg.eigvalsh(0.5 * (g3 + g3.T))[0]) if n else 0.0
    if lam3 < -1e-8:
        msg = (
            f"dual form has indefinite trailing block (min eig {lam3:.3e}); "
            "no coefficient matrix in the template is consistent with the data"
        )
        if require_psd_corner:
            raise DataConsistencyError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return inv


def membership_sb(
    a: np.ndarray, data: DataSet, template: ModelTemplate, noise: SeparatelyBounded, margin: float = 0.0
) -> bool:
    """Whether A explains every sample within its norm bound (with slack margin)."""
    a = np.asarray(a, dtype=float)
    for i in range(data.n_samples):
        zi = template.z_eval(data.x[i], data.u[i])
        d = data.xp[i] - a @ zi
        if float(np.linalg.norm(d)) > noise.bound_for(i) + margin:
            return False
    return True


def membership_cb(a: np.ndarray, form: np.ndarray, ell: int, margin: float = 1e-8) -> bool:
    """Whether [A^T; I]^T F [A^T; I] < -margin * I holds."""
    a = np.asarray(a, dtype=float)
    n = form.shape[0] - ell
    stack = np.vstack([a.T, np.eye(n)])
    val = stack.T @ form @ stack
    lam = float(np.linalg.eigvalsh(0.5 * (val + val.T))[-1])
    return lam < -margin


def membership_cb_dual(a: np.ndarray, dual: np.ndarray, ell: int, margin: float = 1e-8) -> bool:
    """Whether [I; A]^T G [I; A] < -margin * I holds for the dual form."""
    a = np.asarray(a, dtype=float)
    stack = np.vstack([np.eye(ell), a])
    val = stack.T @ dual @ stack
    lam = float(np.linalg.eigvalsh(0.5 * (val + val.T))[-1])
    return lam < -margin


# ----- constraint sets ------------------------------------------------------------


@dataclass
class ConstraintSet:
    """Operating region {(x, u): p_i(x, u) <= 0 for all i}."""

    polys: list[Polynomial] = field(default_factory=list)

    def __post_init__(self):
        if self.polys:
            ctx = self.polys[0].ctx
            for p in self.polys:
                if p.ctx is not ctx and tuple(p.ctx.names) != tuple(ctx.names):
                    raise ValueError("constraint polynomials share one context")

    def __len__(self):
        return len(self.polys)

    def __iter__(self):
        return iter(self.polys)

    def contains(self, point: np.ndarray, slack: float = 0.0) -> bool:
        return all(p.eval(point) <= slack for p in self.polys)

    def find_witness(
        self, box: np.ndarray, n_draws: int = 100_000, rng: np.random.Generator | None = None
    ) -> np.ndarray | None:
        """Sample the box uniformly and return a point inside the set, if found.

        ``box`` has shape (dim, 2) with per-coordinate lower and upper bounds.
        """
        box = np.asarray(box, dtype=float)
        if rng is None:
            rng = np.random.default_rng(0)
        for _ in range(n_draws):
            pt = rng.uniform(box[:, 0], box[:, 1])
            if self.contains(pt):
                return pt
        return None


def constraint_to_quadratic(
    p: Polynomial, template: ModelTemplate, tol: float = 1e-9
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Write p(x, u) = [z; 1]^T P [z; 1] over the template dictionary.

    Returns the minimum-Frobenius-norm particular solution together with a
    basis of the homogeneous solutions (kernel directions), each a symmetric
    (ell + 1) x (ell + 1) matrix. Raises :class:`NotRepresentable` when no
    exact representation exists.
    """
    ctx = template.ctx
    if tuple(p.ctx.names) != tuple(ctx.names):
        raise ValueError("constraint polynomial must live in the template context")
    zeta = list(template.z) + [Polynomial.constant(ctx, 1.0)]
    ell1 = len(zeta)
    pairs = [(k, l) for k in range(ell1) for l in range(k, ell1)]
    prods = [zeta[k] * zeta[l] for k, l in pairs]
    monos = sorted(
        {m for q in prods for m in q.terms} | set(p.terms),
        key=lambda m: m.sort_key(),
    )
    mono_idx = {m: r for r, m in enumerate(monos)}
    amat = np.zeros((len(monos), len(pairs)))
    for c, ((k, l), q) in enumerate(zip(pairs, prods)):
        w = 1.0 if k == l else np.sqrt(2.0)
        for mono, coef in q.terms.items():
            amat[mono_idx[mono], c] += w * coef
    rhs = np.zeros(len(monos))
    for mono, coef in p.terms.items():
        rhs[mono_idx[mono]] = coef
    sol, *_ = np.linalg.lstsq(amat, rhs, rcond=None)
    resid = float(np.max(np.abs(amat @ sol - rhs))) if rhs.size else 0.0
    scale = max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 0.0)
    if resid > tol * scale:
        raise NotRepresentable(
            f"polynomial is not a quadratic form over the dictionary (residual {resid:.3e})"
        )

    def unpack(vec: np.ndarray) -> np.ndarray:
        out = np.zeros((ell1, ell1))
        for c, (k, l) in enumerate(pairs):
            if k == l:
                out[k, k] = vec[c]
            else:
                v = vec[c] / np.sqrt(2.0)
                out[k, l] = v
                out[l, k] = v
        return out

    _, svals, vt = np.linalg.svd(amat, full_matrices=True)
    rank = int(np.sum(svals > max(amat.shape) * np.finfo(float).eps * (svals[0] if svals.size else 1.0)))
    kernel = [unpack(vt[r]) for r in range(rank, len(pairs))]
    return unpack(sol), kernel
