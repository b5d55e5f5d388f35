import numpy as np
import pytest

from hcs.verify import (
    CheckResult,
    format_table,
    girsanov_gap,
    random_invertible,
    random_segment,
    random_spd,
    run_suites,
)


def test_random_helpers_respect_their_ranges(rng):
    for _ in range(20):
        s = random_spd(rng, 3, 0.2, 2.0)
        w = np.linalg.eigvalsh(s)
        assert w.min() >= 0.2 - 1e-12 and w.max() <= 2.0 + 1e-12
        sv = np.linalg.svd(random_invertible(rng, 3), compute_uv=False)
        assert sv.min() >= 0.5 - 1e-12 and sv.max() <= 2.0 + 1e-12


def test_small_suites_pass():
    rows = run_suites(seed=5, scale=0.1)
    assert {r.suite for r in rows} == {"kernels", "riccati", "sdp"}
    failed = [r.name for r in rows if not r.passed]
    assert not failed


def test_corrupted_kernel_is_detected():
    rows = run_suites(["kernels"], seed=5, corrupt_phi12=True, scale=0.1)
    failed = {r.name for r in rows if not r.passed}
    assert any(name.startswith("identity 1") for name in failed)
    assert "identities preserved under products" in failed
    assert "Phi11^-1 Phi12 nonincreasing across jumps" in failed


def test_energy_matches_relative_entropy(rng):
    seg = random_segment(rng, 2, time_varying=True)
    assert girsanov_gap(seg, random_spd(rng, 2), random_spd(rng, 2), 0.4) < 1e-4


def test_nan_residual_fails_and_table_lists_rows():
    rows = [CheckResult("x", "ok", 1e-12, 1e-8, 3), CheckResult("x", "broken", float("nan"), 1e-8, 1)]
    assert rows[0].passed and not rows[1].passed
    table = format_table(rows)
    assert "PASS" in table and "FAIL" in table
    assert rows[1].as_dict()["passed"] is False


def test_unknown_suite():
    with pytest.raises(ValueError):
        run_suites(["everything"])
