"""Per-pass randomized soundness: every applicable instance must leave the
oracle result bags unchanged.  The full 300-case-per-pass run lives in the
acceptance suite; this keeps a fast 60-case smoke per pass."""

import pytest

from soundness import PASS_MAKERS, run_soundness


@pytest.mark.parametrize("name", sorted(PASS_MAKERS))
def test_pass_soundness_smoke(name):
    cases, applied = run_soundness(name, cases=60, seed0=17)
    # the makers must actually exercise the rewrite, not just decline
    assert applied >= cases // 4, f"{name}: only {applied}/{cases} applied"
