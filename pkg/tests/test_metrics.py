import numpy as np
import pytest

from attrobust.metrics import (DegenerateInputError, UndefinedCorrelationError,
                               cosine_alignment, kendall_tau, topk_indices, topk_intersection)


def brute_force_tau(a, b):
    """O(n^2) pair enumeration of tau-b: the oracle the fast path must match."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.size
    con = dis = tie_a = tie_b = 0
    for i in range(n - 1):
        for j in range(i + 1, n):
            da, db = a[i] - a[j], b[i] - b[j]
            if da == 0 and db == 0:
                continue
            if da == 0:
                tie_a += 1
            elif db == 0:
                tie_b += 1
            elif da * db > 0:
                con += 1
            else:
                dis += 1
    denom = np.sqrt((con + dis + tie_a) * (con + dis + tie_b))
    return (con - dis) / denom


class TestTopkIntersection:
    def test_identity(self):
        a = np.array([5.0, 1.0, 3.0, 2.0])
        assert topk_intersection(a, a, 2) == 1.0

    def test_disjoint_topk(self):
        assert topk_intersection([4, 3, 2, 1], [1, 2, 3, 4], 2) == 0.0

    def test_ties_lowest_index(self):
        # all equal: top-2 of both is {0, 1} by the stable tie rule
        assert list(topk_indices([1.0, 1.0, 1.0, 1.0], 2)) == [0, 1]

    def test_matches_set_enumeration(self):
        r = np.random.default_rng(5)
        for _ in range(100):
            n = int(r.integers(5, 40))
            k = int(r.integers(1, n + 1))
            a = r.integers(0, 6, n).astype(float)  # heavy ties
            b = r.integers(0, 6, n).astype(float)

            def topk_set(v):
                order = sorted(range(n), key=lambda i: (-v[i], i))
                return set(order[:k])

            expected = len(topk_set(a) & topk_set(b)) / k
            assert topk_intersection(a, b, k) == pytest.approx(expected, abs=0)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            topk_intersection([1, 2], [1, 2], 3)

    def test_symmetric_and_monotone_invariant(self):
        r = np.random.default_rng(9)
        for _ in range(50):
            a = r.normal(size=30)
            b = r.normal(size=30)
            k = int(r.integers(1, 30))
            v = topk_intersection(a, b, k)
            assert topk_intersection(b, a, k) == v
            # strictly increasing transform applied to both
            assert topk_intersection(np.exp(a), np.exp(b), k) == v


class TestKendallTau:
    def test_perfect_and_reversed(self):
        a = [1.0, 2.0, 3.0, 4.0]
        assert kendall_tau(a, a) == pytest.approx(1.0)
        assert kendall_tau(a, a[::-1]) == pytest.approx(-1.0)

    def test_small_example(self):
        # C=2, D=1, no ties: (2-1)/3
        assert kendall_tau([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3, abs=1e-12)

    def test_matches_bruteforce_with_ties(self):
        r = np.random.default_rng(17)
        for _ in range(200):
            n = int(r.integers(3, 50))
            a = r.integers(0, 8, n).astype(float)
            b = r.integers(0, 8, n).astype(float)
            if np.all(a == a[0]) or np.all(b == b[0]):
                continue
            assert kendall_tau(a, b) == pytest.approx(brute_force_tau(a, b), abs=1e-12)

    def test_undefined_cases(self):
        with pytest.raises(UndefinedCorrelationError):
            kendall_tau([1.0], [2.0])
        with pytest.raises(UndefinedCorrelationError):
            kendall_tau([3.0, 3.0, 3.0], [1.0, 2.0, 3.0])

    def test_monotone_transform_invariance(self):
        r = np.random.default_rng(23)
        a = r.normal(size=40)
        b = r.normal(size=40)
        base = kendall_tau(a, b)
        assert kendall_tau(np.exp(a), b) == pytest.approx(base, abs=1e-12)
        assert kendall_tau(a, 3 * b + 1) == pytest.approx(base, abs=1e-12)
        # reversing the order of one argument flips the sign
        assert kendall_tau(-a, b) == pytest.approx(-base, abs=1e-12)


class TestCosineAlignment:
    def test_parallel_orthogonal(self):
        x = np.array([1.0, 2.0, 2.0])
        assert cosine_alignment(x, 3.5 * x) == pytest.approx(1.0)
        assert cosine_alignment(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(0.0)

    def test_scale_invariance_and_sign_flip(self):
        r = np.random.default_rng(31)
        x = r.normal(size=20)
        g = r.normal(size=20)
        c = cosine_alignment(x, g)
        assert cosine_alignment(2.5 * x, g) == pytest.approx(c, abs=1e-12)
        assert cosine_alignment(-x, g) == pytest.approx(-c, abs=1e-12)

    def test_unit_sphere_euclidean_identity(self):
        # for unit vectors, squared euclidean distance = 2 * (1 - cosine)
        r = np.random.default_rng(41)
        for _ in range(100):
            x = r.normal(size=30)
            g = r.normal(size=30)
            x /= np.linalg.norm(x)
            g /= np.linalg.norm(g)
            lhs = np.linalg.norm(x - g) ** 2
            rhs = 2 * (1 - cosine_alignment(x, g))
            assert lhs == pytest.approx(rhs, abs=1e-9)

    def test_degenerate_norm(self):
        with pytest.raises(DegenerateInputError):
            cosine_alignment(np.zeros(5), np.ones(5))

    def test_channel_mean_reduction(self):
        r = np.random.default_rng(51)
        x = r.normal(size=(3, 4, 4))
        g = r.normal(size=(3, 4, 4))
        expected = cosine_alignment(x.mean(axis=0), g.mean(axis=0))
        assert cosine_alignment(x, g, channel_mean=True) == pytest.approx(expected, abs=1e-12)
