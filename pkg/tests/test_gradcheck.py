import math

import numpy as np
import pytest

from cafseg.gradcheck import (DISTILLATION, TOLERANCE, all_cases, format_table, gradient_error,
                              run_gradcheck)


def test_required_entries_present():
    names = set(all_cases(2))
    for required in ("L_SEG", "L_AD", "L_UD", "L_N", "L_D", "total[step 2]", "conv3x3", "matmul",
                     "nonlocal_forward", "tilde_phi", "hat_phi", "ad_combine"):
        assert required in names
    assert {n for n in names if n.startswith("caf_forward")} >= {
        f"caf_forward[{m}]" for m in ("train_fuse", "test_skip", "test_zero_pad", "test_concat")}


def test_fresh_seed_passes():
    results = run_gradcheck(seeds=[1234])
    bad = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not bad


@pytest.mark.parametrize("name", ["conv3x3", "L_D"])
def test_corrupted_gradient_fails(name):
    (res,) = run_gradcheck(seeds=[0], corrupt=name, only={name})
    assert not res.passed and res.max_rel_error > TOLERANCE


def test_step_one_skips_distillation():
    results = run_gradcheck(seeds=[0], step=1, only=DISTILLATION | {"L_SEG", "total[step 1]"})
    skipped = {r.name for r in results if r.skipped}
    assert skipped == set(DISTILLATION)
    assert all(r.passed for r in results)
    table = format_table(results)
    assert "skipped" in table and "total[step 1]" in table


def test_gradient_error_rule():
    assert gradient_error(np.array([1.0]), np.array([1.0 + 1e-6])) == pytest.approx(1e-6, rel=1e-3)
    assert gradient_error(np.array([1e-10]), np.array([-3e-10])) == 0.0
    assert math.isclose(gradient_error(np.array([0.0]), np.array([2e-8])), 1.0)
