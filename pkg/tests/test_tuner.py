import json
import math

import numpy as np
import pytest

from standseg.errors import InputError, NumericError
from standseg.tuner import SearchSpace, TrialJournal, run_study, sample_params, should_prune


def journal_with(values_by_trial):
    j = TrialJournal()
    for i, values in values_by_trial.items():
        j.start(i, {})
        for e, v in values.items():
            j.report(i, e, v)
        j.finish(i, "complete")
    return j


def test_first_ten_trials_never_pruned():
    j = journal_with({i: {40: 0.9} for i in range(3)})
    assert not should_prune(j, 3, 40, 0.0)


def test_warmup_epochs_never_pruned():
    j = journal_with({i: {25: 0.9} for i in range(12)})
    assert not should_prune(j, 12, 25, 0.0)


def test_median_example():
    j = journal_with({0: {31: 0.40}, 1: {31: 0.50}, 2: {31: 0.60}})
    assert should_prune(j, 12, 31, 0.30)
    assert not should_prune(j, 12, 31, 0.50)


def test_even_count_median_and_missing_reports():
    j = journal_with({0: {31: 0.2}, 1: {31: 0.6}, 2: {30: 0.9}})
    assert should_prune(j, 11, 31, 0.39)
    assert not should_prune(j, 11, 31, 0.4)
    assert not should_prune(j, 11, 32, 0.0)


def test_non_finite_value_rejected():
    with pytest.raises(ValueError):
        should_prune(TrialJournal(), 12, 40, math.nan)


def test_sampling_bounds_and_beta():
    space = SearchSpace()
    for i in range(2000):
        p = sample_params(space, i, 11)
        assert 8 <= p["base_filters"] <= 32 and p["filter_size"] in (3, 5, 7)
        assert 1e-5 <= p["learning_rate"] <= 1e-3
        assert 0 <= p["dropout_rate"] <= 0.5 and 1 <= p["gamma"] <= 3
        assert 0.3 <= p["alpha"] <= 0.7 and p["beta"] == 1.0 - p["alpha"]
    fixed = sample_params(SearchSpace(alpha=(0.4, 0.4)), 0, 0)
    assert fixed["alpha"] == 0.4 and fixed["beta"] == 0.6


def test_log_uniform_learning_rate():
    logs = [math.log10(sample_params(SearchSpace(), i, 5)["learning_rate"]) for i in range(10_000)]
    assert abs(np.mean(logs) + 4.0) <= 0.05


def test_sampling_deterministic():
    assert sample_params(SearchSpace(), 4, 1) == sample_params(SearchSpace(), 4, 1)
    assert sample_params(SearchSpace(), 4, 1) != sample_params(SearchSpace(), 5, 1)


def test_invalid_space():
    with pytest.raises(InputError):
        SearchSpace(filter_sizes=(4,)).validate()
    with pytest.raises(InputError):
        run_study(SearchSpace(), 0, runner=lambda *a: None)


def scripted_curves(n_trials=20, n_epochs=45, seed=0):
    rng = np.random.default_rng(seed)
    return [np.clip(rng.uniform(0.1, 0.6) + 0.005 * np.arange(n_epochs) + rng.normal(0, 0.02, n_epochs), -1, 1)
            for _ in range(n_trials)]


def scripted_runner(curves, calls=None):
    def run(index, params, report):
        if calls is not None:
            calls.append(index)
        for e, v in enumerate(curves[index], start=1):
            report(e, float(v))

    return run


def median_oracle(curves, startup=10, warmup=30):
    """Standalone replay of the pruning rule: {trial: pruned epoch or None}."""
    seen = []
    outcome = {}
    for i, curve in enumerate(curves):
        reported = {}
        outcome[i] = None
        for e, v in enumerate(curve, start=1):
            reported[e] = v
            prior = sorted(r[e] for r in seen if e in r)
            if i >= startup and e > warmup and prior:
                k = len(prior)
                med = prior[k // 2] if k % 2 else (prior[k // 2 - 1] + prior[k // 2]) / 2
                if v < med:
                    outcome[i] = e
                    break
        seen.append(reported)
    return outcome


def test_scripted_study_matches_oracle():
    curves = scripted_curves()
    journal = run_study(SearchSpace(), 20, runner=scripted_runner(curves))
    expected = median_oracle(curves)
    got = {t.index: t.pruned_epoch if t.status == "pruned" else None for t in journal.ordered()}
    assert got == expected
    assert any(v is not None for v in expected.values())
    assert all(expected[i] is None for i in range(10))


def test_best_trial_is_max_over_complete():
    curves = scripted_curves()
    journal = run_study(SearchSpace(), 20, runner=scripted_runner(curves))
    complete = [t for t in journal.ordered() if t.status == "complete"]
    best = max(max(t.values.values()) for t in complete)
    assert journal.summary()["best_trial"]["best_val_mmcc"] == best


def test_single_trial_complete():
    journal = run_study(SearchSpace(), 1, runner=scripted_runner(scripted_curves(1)))
    assert journal.trials[0].status == "complete"


def test_failed_trial_recorded_and_study_continues():
    def run(index, params, report):
        report(1, 0.5)
        if index == 1:
            raise NumericError("non-finite loss")

    journal = run_study(SearchSpace(), 3, runner=run)
    assert [t.status for t in journal.ordered()] == ["complete", "failed", "complete"]


def test_resume_skips_finished_trials(tmp_path):
    curves = scripted_curves()
    path = tmp_path / "journal.jsonl"

    class Killed(Exception):
        pass

    def dying(index, params, report):
        if index == 7:
            report(1, 0.3)
            raise Killed

        scripted_runner(curves)(index, params, report)

    with pytest.raises(Killed):
        run_study(SearchSpace(), 20, runner=dying, journal_path=path)
    calls = []
    resumed = run_study(SearchSpace(), 20, runner=scripted_runner(curves, calls), journal_path=path)
    assert calls == list(range(7, 20))
    fresh = run_study(SearchSpace(), 20, runner=scripted_runner(curves))
    assert resumed.summary() == fresh.summary()
    assert resumed.trials[7].values == fresh.trials[7].values
    events = [json.loads(line) for line in path.read_text().splitlines()]
    assert sum(e["event"] == "start" and e["trial"] == 7 for e in events) == 2
