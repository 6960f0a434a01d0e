import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecovnet.ensemble import PredictionSet, hard_ensemble, single_snapshot, soft_ensemble
from ecovnet.errors import ArgumentError, DimensionError


def oracle_soft(vectors, m):
    """Loop-based mean of the last m vectors, then first index of the maximum."""
    used = vectors[len(vectors) - m:]
    C = len(used[0])
    mean = [sum(v[c] for v in used) / m for c in range(C)]
    best = 0
    for c in range(1, C):
        if mean[c] > mean[best]:
            best = c
    return best


def oracle_hard(vectors, m):
    used = vectors[len(vectors) - m:]
    C = len(used[0])
    votes = [0] * C
    for v in used:
        top = 0
        for c in range(1, C):
            if v[c] > v[top]:
                top = c
        votes[top] += 1
    most = max(votes)
    tied = [c for c in range(C) if votes[c] == most]
    mean = {c: sum(v[c] for v in used) / m for c in tied}
    best = tied[0]
    for c in tied[1:]:
        if mean[c] > mean[best]:
            best = c
    return best


def random_psets(n, S=1, M=5, C=3, seed=0):
    r = np.random.default_rng(seed)
    for _ in range(n):
        logits = r.standard_normal((S, M, C)) * 2
        e = np.exp(logits)
        yield e / e.sum(axis=2, keepdims=True)


class TestExamples:
    def test_clear_majority(self):
        votes = [0, 0, 1, 2, 0]
        probs = np.eye(3)[votes][None] * 0.8 + 0.2 / 3
        assert hard_ensemble(PredictionSet(probs))[0] == 0

    def test_m1_is_last_snapshot(self, rng):
        for probs in random_psets(20, S=4):
            pset = PredictionSet(probs, m=1)
            np.testing.assert_array_equal(hard_ensemble(pset), probs[:, -1].argmax(1))
            np.testing.assert_array_equal(soft_ensemble(pset)[0], probs[:, -1].argmax(1))
            np.testing.assert_array_equal(single_snapshot(pset), probs[:, -1].argmax(1))

    def test_tie_broken_by_mean_probability(self):
        # votes 0,0,1,1,2; mean of class 0 is 0.42, class 1 is 0.40
        probs = np.array([[
            [0.6, 0.3, 0.1],
            [0.6, 0.3, 0.1],
            [0.3, 0.6, 0.1],
            [0.3, 0.5, 0.2],
            [0.3, 0.3, 0.4],
        ]])
        mean = probs[0].mean(axis=0)
        assert mean[0] == pytest.approx(0.42) and mean[1] == pytest.approx(0.40)
        assert hard_ensemble(PredictionSet(probs))[0] == 0

    def test_exact_tie_lowest_index(self):
        probs = np.array([[[0.6, 0.4, 0.0], [0.4, 0.6, 0.0]]])
        assert hard_ensemble(PredictionSet(probs))[0] == 0

    def test_soft_mean(self):
        probs = np.array([[[0.1, 0.1, 0.8], [0.7, 0.2, 0.1], [0.5, 0.3, 0.2]]])
        labels, mean = soft_ensemble(PredictionSet(probs, m=2))
        np.testing.assert_allclose(mean[0], [0.6, 0.25, 0.15])
        assert labels[0] == 0

    def test_errors(self):
        with pytest.raises(DimensionError):
            PredictionSet(np.zeros((3, 3)))
        with pytest.raises(ArgumentError):
            PredictionSet(np.full((1, 5, 3), 1 / 3), m=6)
        with pytest.raises(ArgumentError):
            PredictionSet(np.full((1, 5, 3), 1 / 3), m=0)
        with pytest.raises(ArgumentError):
            soft_ensemble(PredictionSet(np.zeros((0, 5, 3))))
        with pytest.raises(ArgumentError):
            PredictionSet.from_snapshots([])


class TestOracle:
    def test_brute_force_equivalence(self):
        mismatches = 0
        for probs in random_psets(1000, seed=42):
            vectors = [list(v) for v in probs[0]]
            for m in range(1, 6):
                pset = PredictionSet(probs, m)
                mismatches += hard_ensemble(pset)[0] != oracle_hard(vectors, m)
                mismatches += soft_ensemble(pset)[0][0] != oracle_soft(vectors, m)
        assert mismatches == 0

    def test_brute_force_with_ties(self):
        # coarse probabilities make vote ties and mean ties frequent
        r = np.random.default_rng(5)
        for _ in range(500):
            raw = r.integers(0, 4, (1, 5, 3)).astype(float) + 1e-3 * np.arange(3)[::-1]
            probs = raw / raw.sum(axis=2, keepdims=True)
            vectors = [list(v) for v in probs[0]]
            for m in range(1, 6):
                assert hard_ensemble(PredictionSet(probs, m))[0] == oracle_hard(vectors, m)


class TestInvariants:
    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), m=st.integers(1, 5), data=st.data())
    def test_permutation_invariance(self, seed, m, data):
        probs = next(random_psets(1, S=6, seed=seed))
        used_perm = data.draw(st.permutations(range(5 - m, 5)))
        unused_perm = data.draw(st.permutations(range(5 - m)))
        shuffled = probs[:, list(unused_perm) + list(used_perm)]
        a, b = PredictionSet(probs, m), PredictionSet(shuffled, m)
        np.testing.assert_array_equal(hard_ensemble(a), hard_ensemble(b))
        np.testing.assert_array_equal(soft_ensemble(a)[0], soft_ensemble(b)[0])
        np.testing.assert_allclose(soft_ensemble(a)[1], soft_ensemble(b)[1], atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), m=st.integers(1, 5))
    def test_idempotence_and_unanimity(self, seed, m):
        one = next(random_psets(1, S=4, M=1, seed=seed))
        probs = np.repeat(one, 5, axis=1)
        pset = PredictionSet(probs, m)
        labels, mean = soft_ensemble(pset)
        np.testing.assert_allclose(mean, one[:, 0], atol=1e-15)
        np.testing.assert_array_equal(labels, one[:, 0].argmax(1))
        np.testing.assert_array_equal(hard_ensemble(pset), one[:, 0].argmax(1))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), m=st.integers(1, 5))
    def test_soft_mean_is_distribution(self, seed, m):
        probs = next(random_psets(1, S=8, seed=seed))
        _, mean = soft_ensemble(PredictionSet(probs, m))
        assert np.all(mean >= 0)
        np.testing.assert_allclose(mean.sum(axis=1), 1.0, atol=1e-6)

    @given(seed=st.integers(0, 10_000), k=st.floats(0.1, 10))
    def test_vote_unchanged_by_logit_scaling(self, seed, k):
        logits = np.random.default_rng(seed).standard_normal((4, 5, 3))
        def sm(z):
            e = np.exp(z - z.max(axis=2, keepdims=True))
            return e / e.sum(axis=2, keepdims=True)
        a, b = PredictionSet(sm(logits)), PredictionSet(sm(k * logits))
        np.testing.assert_array_equal(a.probs.argmax(2), b.probs.argmax(2))
