import numpy as np
import pytest

from cocelab.data import NO_STATE, Dataset
from cocelab.evaluation import (
    balanced_error,
    evaluate,
    max_balance_gap,
    per_state_expected_loss,
)
from cocelab.models import ModelSpec

SPEC = ModelSpec("linear", 2, 2)
# logit_1 - logit_0 = x[0]: predicts class 1 iff x[0] > 0
SIGN = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0])


def _enumerate_balanced_error(spec, params, ds):
    rates = []
    for s in sorted(set(ds.states.tolist())):
        wrong = total = 0
        for i in range(len(ds)):
            if ds.states[i] == s:
                total += 1
                wrong += int(spec.predict(params, ds.X[i]) != ds.y[i])
        rates.append(wrong / total)
    return sum(rates) / len(rates)


class TestBalancedError:
    def test_perfect(self):
        ds = Dataset([[1.0, 0], [-1.0, 0], [2.0, 1]], [1, 0, 1], [0, 1, 2])
        assert balanced_error(SPEC, SIGN, ds) == 0.0

    def test_one_state_all_wrong(self):
        X = [[1.0, 0], [-1.0, 0], [1.0, 0], [-1.0, 0], [1.0, 0], [-1.0, 0]]
        ds = Dataset(X, [1, 0, 0, 1, 1, 0], [0, 0, 1, 1, 2, 2])
        assert balanced_error(SPEC, SIGN, ds) == pytest.approx(1 / 3, abs=1e-16)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(0)
        spec = ModelSpec("linear", 3, 3)
        for _ in range(100):
            n = int(rng.integers(1, 51))
            ds = Dataset(rng.normal(size=(n, 3)), rng.integers(0, 3, n), rng.integers(0, 6, n))
            params = rng.normal(size=spec.num_params)
            assert balanced_error(spec, params, ds) == _enumerate_balanced_error(spec, params, ds)

    @pytest.mark.parametrize("k", [2, 5])
    def test_duplicating_a_state_changes_nothing(self, k):
        rng = np.random.default_rng(k)
        spec = ModelSpec("linear", 3, 3)
        for _ in range(20):
            n = int(rng.integers(2, 40))
            ds = Dataset(rng.normal(size=(n, 3)), rng.integers(0, 3, n), rng.integers(0, 3, n))
            params = rng.normal(size=spec.num_params)
            s = ds.states[0]
            extra = np.flatnonzero(ds.states == s)
            idx = np.concatenate([np.arange(n)] + [extra] * (k - 1))
            assert balanced_error(spec, params, ds[idx]) == balanced_error(spec, params, ds)

    def test_single_state_is_plain_error(self):
        rng = np.random.default_rng(9)
        ds = Dataset(rng.normal(size=(30, 2)), rng.integers(0, 2, 30), np.full(30, 4))
        plain = np.mean(SPEC.predict(SIGN, ds.X) != ds.y)
        assert balanced_error(SPEC, SIGN, ds) == pytest.approx(plain, abs=1e-15)

    def test_requires_states(self):
        ds = Dataset([[1.0, 0]], [1], [NO_STATE])
        with pytest.raises(ValueError):
            balanced_error(SPEC, SIGN, ds)


class TestPerStateLoss:
    def test_single_state_equals_mean(self):
        rng = np.random.default_rng(1)
        ds = Dataset(rng.normal(size=(10, 2)), rng.integers(0, 2, 10), np.zeros(10, int))
        p = rng.normal(size=SPEC.num_params)
        got = per_state_expected_loss(SPEC, p, ds)
        assert got == {0: pytest.approx(SPEC.losses(p, ds.X, ds.y).mean())}

    def test_hand_set_losses(self):
        ds = Dataset(np.zeros((4, 2)), [0, 0, 0, 0], [1, 1, 3, 3])
        fixed = np.array([0.0, 0.0, 1.0, 1.0])
        assert per_state_expected_loss(SPEC, SIGN, ds, base_loss=lambda p, d: fixed) == {1: 0.0, 3: 1.0}

    def test_weighted_recombination(self):
        rng = np.random.default_rng(2)
        ds = Dataset(rng.normal(size=(40, 2)), rng.integers(0, 2, 40), rng.integers(0, 6, 40))
        p = rng.normal(size=SPEC.num_params)
        per = per_state_expected_loss(SPEC, p, ds)
        counts = {s: int(np.sum(ds.states == s)) for s in per}
        total = sum(counts[s] * v for s, v in per.items()) / len(ds)
        assert total == pytest.approx(SPEC.losses(p, ds.X, ds.y).mean(), rel=1e-13)


class TestMaxBalanceGap:
    def test_examples(self):
        assert max_balance_gap({0: 0.3, 1: 0.3, 2: 0.3}) == 0.0
        assert max_balance_gap({0: 0.0, 1: 1.0}) == 0.5

    def test_fuzzed_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            k = int(rng.integers(1, 8))
            vals = rng.choice([rng.normal(), 0.1], size=k) * 10 ** rng.uniform(-8, 8)
            assert max_balance_gap(dict(enumerate(vals))) >= 0

    def test_empty(self):
        with pytest.raises(ValueError):
            max_balance_gap({})


class TestEvaluate:
    def test_report_fields(self):
        rng = np.random.default_rng(4)
        ds = Dataset(rng.normal(size=(60, 2)), rng.integers(0, 2, 60), rng.integers(0, 3, 60))
        rep = evaluate(SPEC, SIGN, ds, s_max=5)
        assert rep.balanced_accuracy == pytest.approx(1 - balanced_error(SPEC, SIGN, ds))
        assert rep.balanced_accuracy == pytest.approx(1 - np.mean(list(rep.per_state_error.values())))
        assert 0 <= rep.average_accuracy <= 1
        assert rep.param_l2 == 1.0
        assert rep.max_balance_gap >= 0
        names = [m for m, _ in rep.metrics()]
        assert names[:5] == ["average_accuracy", "average_loss", "param_l2", "balanced_accuracy", "max_balance_gap"]
        assert "state2_error" in names

    def test_stateless_set_has_no_balanced_metrics(self):
        ds = Dataset(np.ones((3, 2)), [1, 1, 0], [NO_STATE] * 3)
        rep = evaluate(SPEC, SIGN, ds)
        assert rep.balanced_accuracy is None and rep.max_balance_gap is None
        assert rep.average_accuracy == pytest.approx(2 / 3)
        assert [m for m, _ in rep.metrics()] == ["average_accuracy", "average_loss", "param_l2"]
