import numpy as np

from harqage.verify import SUITES, check_dpp_consistency, check_kernel, check_moments, random_config, random_state, run_all


def test_random_states_respect_ranges() -> None:
    rng = np.random.default_rng(0)
    for _ in range(200):
        cfg = random_config(rng)
        state = random_state(cfg, rng)
        assert len(state) == cfg.num_sources >= 1
        for k, source in enumerate(state):
            assert 0 <= source.aoi <= cfg.aoi_cap
            assert 0 <= source.attempts <= cfg.max_attempts
            if k >= cfg.num_random_sources:
                assert source.fresh_age == 0


def test_closed_forms_pass() -> None:
    rng = np.random.default_rng(1)
    for check in (check_moments, check_dpp_consistency, check_kernel):
        result = check(500, rng)
        assert result.passed, str(result)
        assert result.samples == 500


def test_run_all_reports_every_suite() -> None:
    results = run_all(samples=1000, seed=3)
    assert [result.samples for result in results] == [1000, 1000, 1000, 1]
    assert len(results) == len(SUITES)
    assert all(result.passed for result in results), '\n'.join(map(str, results))
    assert str(results[0]).startswith('PASS')
