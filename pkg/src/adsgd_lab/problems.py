"""Local objectives, their gradients, and block views of the global problem.

Every local problem works on plain 1-D numpy arrays. Stochastic gradients take
an explicit ``numpy.random.Generator`` so each agent can own its own stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, PartitionSpec, partition_dataset


class LocalProblem:
    """Interface shared by the local objectives ``f_i``.

    Attributes
    ----------
    agent_id : int
    smoothness : float
        Lipschitz constant of ``full_gradient``.
    lower_bound : float
        A value ``f_i*`` with ``loss(x) >= f_i*`` everywhere.
    variance_bound : float
        Upper bound on ``E||stochastic_gradient(x) - full_gradient(x)||^2``.
    """

    agent_id: int
    smoothness: float
    lower_bound: float
    variance_bound: float
    dim: int

    def loss(self, x) -> float:
        raise NotImplementedError

    def full_gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def stochastic_gradient(self, x, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


@dataclass
class QuadraticProblem(LocalProblem):
    """``f(x) = 0.5 * ||A x - b||^2`` with optional zero-mean bounded noise.

    The noise added to the stochastic gradient is, per coordinate, a scaled
    sum of three uniforms (bell shaped, bounded by ``3 * sqrt(noise_var/d)``)
    whose total variance is exactly ``noise_var``.
    """

    A: np.ndarray
    b: np.ndarray
    noise_var: float = 0.0
    agent_id: int = 0

    def __post_init__(self):
        A = np.asarray(self.A)
        b = np.asarray(self.b)
        if A.ndim != 2 or b.shape != (A.shape[0],):
            raise ValueError("A must be 2-D and b must match its row count")
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")
        self.A, self.b = A, b
        self.dim = A.shape[1]
        if A.dtype == object:
            # exact-arithmetic instance; spectral data from a float copy
            Af, bf = A.astype(float), b.astype(float)
        else:
            Af, bf = A, b
        gram = Af.T @ Af
        self.smoothness = float(np.linalg.eigvalsh(gram)[-1])
        x_star = np.linalg.lstsq(Af, bf, rcond=None)[0]
        self.minimizer = x_star
        self.lower_bound = 0.5 * float(np.sum((Af @ x_star - bf) ** 2))
        self.variance_bound = float(self.noise_var)

    def loss(self, x) -> float:
        r = self.A @ x - self.b
        return 0.5 * float(r @ r)

    def full_gradient(self, x):
        return self.A.T @ (self.A @ x - self.b)

    def stochastic_gradient(self, x, rng):
        g = self.full_gradient(x)
        if self.noise_var == 0:
            return g
        half_width = np.sqrt(self.noise_var / self.dim)
        u = rng.uniform(-half_width, half_width, size=(3, self.dim))
        return g + u.sum(axis=0)


def make_quadratic(n: int, d: int, seed: int = 0, condition: float = 10.0,
                   noise_var: float = 0.0, shared_minimizer: bool = False
                   ) -> list[QuadraticProblem]:
    """Random least-squares objectives with ``A_i^T A_i`` spectrum in ``[1, condition]``.

    With ``shared_minimizer`` every ``f_i`` is minimized at the same point, so
    constant-step decentralized methods can reach exact consensus.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if d < 1:
        raise ValueError("dimension d must be at least 1")
    if condition < 1:
        raise ValueError("condition must be >= 1")
    rng = np.random.default_rng(seed)
    common = rng.standard_normal(d)
    problems = []
    for i in range(n):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        eigs = np.linspace(1.0, condition, d) if d > 1 else np.array([condition])
        A = q @ np.diag(np.sqrt(eigs)) @ q.T
        b = A @ common if shared_minimizer else rng.standard_normal(d)
        problems.append(QuadraticProblem(A, b, noise_var=noise_var, agent_id=i))
    return problems


def global_minimizer(problems) -> np.ndarray:
    """Minimizer of ``sum_i f_i`` for quadratic problems (normal equations)."""
    gram = sum(p.A.T @ p.A for p in problems)
    rhs = sum(p.A.T @ p.b for p in problems)
    return np.linalg.solve(gram, rhs)


def _sigmoid_neg(z):
    # sigma(-z) = 1 / (1 + exp(z)), computed without overflow
    return np.exp(-np.logaddexp(0.0, z))


@dataclass
class LogisticProblem(LocalProblem):
    """Mean logistic loss plus the bounded penalty ``reg * sum x_j^2 / (1 + x_j^2)``.

    ``signs`` holds labels in {-1, +1}. Minibatches are drawn uniformly with
    replacement, which makes the stochastic gradient exactly unbiased.
    """

    features: np.ndarray
    signs: np.ndarray
    reg_weight: float = 0.0
    batch_size: int = 32
    agent_id: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.signs = np.asarray(self.signs, dtype=float)
        m = self.features.shape[0]
        if m == 0:
            raise ValueError(f"agent {self.agent_id}: empty local shard")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.dim = self.features.shape[1]
        gram_top = np.linalg.eigvalsh(self.features.T @ self.features)[-1]
        self.smoothness = 0.25 * float(gram_top) / m + 2.0 * self.reg_weight
        self.lower_bound = 0.0
        # E||g_s||^2 <= mean ||a_s||^2 since |sigma| <= 1; the penalty is exact
        self.variance_bound = float(np.mean(np.sum(self.features ** 2, axis=1))) / self.batch_size

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def _penalty(self, x):
        return self.reg_weight * float(np.sum(x ** 2 / (1.0 + x ** 2)))

    def penalty_gradient(self, x):
        return 2.0 * self.reg_weight * x / (1.0 + x ** 2) ** 2

    def _data_gradient(self, idx, x):
        a = self.features[idx]
        y = self.signs[idx]
        weights = -y * _sigmoid_neg(y * (a @ x))
        return a.T @ weights / a.shape[0]

    def loss(self, x) -> float:
        z = self.signs * (self.features @ x)
        return float(np.mean(np.logaddexp(0.0, -z))) + self._penalty(x)

    def full_gradient(self, x):
        return self._data_gradient(slice(None), x) + self.penalty_gradient(x)

    def stochastic_gradient(self, x, rng):
        idx = rng.integers(0, self.n_samples, size=self.batch_size)
        return self._data_gradient(idx, x) + self.penalty_gradient(x)

    def accuracy(self, x) -> float:
        return float(np.mean(np.sign(self.features @ x) == self.signs))


def _as_signs(labels, positive=None):
    labels = np.asarray(labels)
    values = np.unique(labels)
    if positive is None:
        if len(values) > 2:
            raise ValueError("labels are not binary; pass positive= to pick the +1 class set")
        positive = (values.max(),)
    return np.where(np.isin(labels, list(np.atleast_1d(positive))), 1.0, -1.0)


def make_nonconvex_logreg(dataset: Dataset, partition: PartitionSpec,
                          reg_weight: float = 0.01, batch_size: int = 32,
                          positive=None) -> list[LogisticProblem]:
    """One regularized logistic problem per shard of ``partition_dataset``."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if reg_weight < 0:
        raise ValueError("reg_weight must be nonnegative")
    signs = _as_signs(dataset.labels, positive)
    shards = partition_dataset(dataset, partition)
    return [LogisticProblem(dataset.features[idx], signs[idx], reg_weight,
                            batch_size, agent_id=i)
            for i, idx in enumerate(shards)]


def estimate_smoothness(problem: LocalProblem, trials: int, rng: np.random.Generator,
                        scale: float = 1.0) -> float:
    """Largest observed ``||grad f(x) - grad f(y)|| / ||x - y||`` over random pairs.

    Only a lower estimate of the true constant; used to pick step sizes.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    best = 0.0
    for _ in range(trials):
        x = scale * rng.standard_normal(problem.dim)
        y = scale * rng.standard_normal(problem.dim)
        gap = np.linalg.norm(x - y)
        if gap == 0:
            continue
        ratio = np.linalg.norm(problem.full_gradient(x) - problem.full_gradient(y)) / gap
        best = max(best, float(ratio))
    return best


def total_loss(problems, x) -> float:
    return float(sum(p.loss(x) for p in problems))


def total_gradient(problems, x) -> np.ndarray:
    return sum(p.full_gradient(x) for p in problems)


# ---------------------------------------------------------------------------
# block problems (the ASBCD view)


class BlockProblem:
    """A function of a vector split into blocks ``x = (x_1, ..., x_n)``.

    Gradients take a *view*: a sequence with one array per block. Entries may
    be ``None`` for blocks that the requested block gradient does not read.
    """

    block_dims: tuple
    smoothness: float
    lower_bound: float

    @property
    def n_blocks(self) -> int:
        return len(self.block_dims)

    def loss(self, blocks) -> float:
        raise NotImplementedError

    def block_gradient(self, i, view) -> np.ndarray:
        raise NotImplementedError

    def block_stochastic_gradient(self, i, view, rng) -> np.ndarray:
        return self.block_gradient(i, view)

    def split(self, x) -> list:
        out, start = [], 0
        for d in self.block_dims:
            out.append(np.asarray(x)[start:start + d])
            start += d
        return out

    def reads(self, i) -> tuple:
        """Blocks whose values ``block_gradient(i, .)`` depends on."""
        return tuple(range(self.n_blocks))


@dataclass
class QuadraticBlockProblem(BlockProblem):
    """``f(x) = 0.5 x^T H x - c^T x`` with ``H`` symmetric positive semidefinite."""

    H: np.ndarray
    c: np.ndarray
    block_dims: tuple
    noise_var: float = 0.0

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        self.block_dims = tuple(int(d) for d in self.block_dims)
        if sum(self.block_dims) != self.H.shape[0]:
            raise ValueError("block dimensions must add up to the problem size")
        if not np.array_equal(self.H, self.H.T):
            raise ValueError("H must be symmetric")
        eigs = np.linalg.eigvalsh(self.H)
        if eigs[0] < -1e-12:
            raise ValueError("H must be positive semidefinite")
        self.smoothness = float(eigs[-1])
        x_star = np.linalg.lstsq(self.H, self.c, rcond=None)[0]
        self.lower_bound = float(0.5 * x_star @ self.H @ x_star - self.c @ x_star)
        self._offsets = np.concatenate([[0], np.cumsum(self.block_dims)])

    def loss(self, blocks) -> float:
        x = np.concatenate(blocks)
        return float(0.5 * x @ self.H @ x - self.c @ x)

    def full_gradient(self, x):
        return self.H @ x - self.c

    def block_gradient(self, i, view):
        x = np.concatenate(view)
        lo, hi = self._offsets[i], self._offsets[i + 1]
        return self.H[lo:hi] @ x - self.c[lo:hi]

    def block_stochastic_gradient(self, i, view, rng):
        g = self.block_gradient(i, view)
        if self.noise_var:
            g = g + rng.normal(0.0, np.sqrt(self.noise_var / len(g)), size=len(g))
        return g


@dataclass
class PenalizedProblem(BlockProblem):
    """``L_alpha(x) = sum_i f_i(x_i) + x^T (I - W) x / (2 alpha)`` over agent blocks.

    Block coordinate descent on this function with step ``alpha`` reproduces
    the asynchronous decentralized SGD update exactly.
    """

    local_problems: list
    w: np.ndarray
    alpha: float
    lambda_min: float = field(default=None)

    def __post_init__(self):
        n = len(self.local_problems)
        self.w = np.asarray(self.w)
        if self.w.shape != (n, n):
            raise ValueError("mixing matrix does not match the number of agents")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        dims = {p.dim for p in self.local_problems}
        if len(dims) != 1:
            raise ValueError("all local problems must share a dimension")
        self.block_dims = (dims.pop(),) * n
        if self.lambda_min is None:
            self.lambda_min = float(np.linalg.eigvalsh(self.w.astype(float))[0])
        l_f = max(p.smoothness for p in self.local_problems)
        self.smoothness = l_f + (1.0 - self.lambda_min) / float(self.alpha)
        self.lower_bound = float(sum(p.lower_bound for p in self.local_problems))
        self._reads = [tuple(j for j in range(n) if j == i or self.w[i, j] != 0)
                       for i in range(n)]

    def reads(self, i):
        return self._reads[i]

    def loss(self, blocks) -> float:
        X = np.stack(blocks)
        disagreement = float(np.sum(X * X) - np.sum(X * (self.w @ X)))
        return (sum(p.loss(x) for p, x in zip(self.local_problems, blocks))
                + disagreement / (2.0 * self.alpha))

    def mixing_term(self, i, view):
        """``(x_i - [W x]_i) / alpha`` with the row summed self first, then neighbors."""
        mixed = self.w[i, i] * view[i]
        for j in self._reads[i]:
            if j != i:
                mixed = mixed + self.w[i, j] * view[j]
        return (view[i] - mixed) / self.alpha

    def block_gradient(self, i, view):
        return self.local_problems[i].full_gradient(view[i]) + self.mixing_term(i, view)

    def block_stochastic_gradient(self, i, view, rng):
        g = self.local_problems[i].stochastic_gradient(view[i], rng)
        return g + self.mixing_term(i, view)
