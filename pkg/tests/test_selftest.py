import numpy as np
import pytest

from fmrt.autodiff import ops
from fmrt.selftest import (
    FAULTS,
    CheckResult,
    SelftestReport,
    auc_reference,
    check_names,
    injected_fault,
    run_selftest,
)

FAST_GRAD = ["grad:dw_conv2d", "grad:conv2d", "grad:layer_norm", "grad:fpl", "grad:coarse_loss", "grad:fine_loss"]


class TestRegistry:
    def test_groups_and_prefixes(self):
        names = check_names()
        assert len(names) == len(set(names))
        for group in ("grad", "oracle", "inv"):
            sub = check_names((group,))
            assert sub and all(n.startswith(group + ":") for n in sub)
        assert {"grad:recformer_layer", "oracle:linear_attention", "inv:gt_labels"} <= set(names)

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError):
            run_selftest(names=["grad:missing"])


class TestReport:
    def test_line_and_failures(self):
        report = SelftestReport([CheckResult("a", True, 0.0, 1e-6, 0.1), CheckResult("b", False, 2.0, 1e-3, 0.2, "worst x")])
        assert not report.passed and report.failures == ["b"]
        lines = report.lines()
        assert lines[0].startswith("PASS  a") and lines[1].startswith("FAIL  b") and lines[1].endswith("worst x")


class TestChecks:
    def test_fast_gradients_pass(self):
        report = run_selftest(names=FAST_GRAD)
        assert report.passed, report.lines()
        assert len(report.results) == len(FAST_GRAD)

    def test_oracles_pass(self):
        report = run_selftest(groups=("oracle",))
        assert report.passed, report.lines()

    def test_invariants_pass(self):
        report = run_selftest(groups=("inv",))
        assert report.passed, report.lines()

    def test_seed_changes_instances_not_outcome(self):
        a = run_selftest(seed=1, names=["grad:layer_norm"]).results[0]
        b = run_selftest(seed=2, names=["grad:layer_norm"]).results[0]
        assert a.passed and b.passed and a.max_error != b.max_error


class TestFaultInjection:
    def test_dw_fault_caught_others_unaffected(self):
        report = run_selftest(fault="dw_conv2d", names=FAST_GRAD)
        failed = set(report.failures)
        assert "grad:dw_conv2d" in failed and "grad:fpl" in failed
        assert not failed & {"grad:conv2d", "grad:layer_norm", "grad:coarse_loss", "grad:fine_loss"}

    def test_fault_is_scoped(self):
        original = ops.dw_conv2d
        with injected_fault("dw_conv2d"):
            assert ops.dw_conv2d is not original
        assert ops.dw_conv2d is original

    def test_forward_unchanged_by_fault(self):
        from fmrt.autodiff.tensor import Tensor, default_dtype

        rng = np.random.default_rng(0)
        x, k = rng.standard_normal((2, 5, 5)), rng.standard_normal((2, 3, 3))
        with default_dtype(np.float64):
            clean = ops.dw_conv2d(Tensor(x), Tensor(k)).data
            with injected_fault("dw_conv2d"):
                broken = ops.dw_conv2d(Tensor(x), Tensor(k)).data
        np.testing.assert_array_equal(clean, broken)

    def test_unknown_fault(self):
        assert "dw_conv2d" in FAULTS
        with pytest.raises(ValueError):
            with injected_fault("softmax"):
                pass


class TestAucReference:
    def test_hand_value(self):
        assert auc_reference([1.0, 3.0], 5) == pytest.approx(0.75)
        assert auc_reference([0.0], 3) == pytest.approx(1.0)
        assert auc_reference([4.0], 3) == 0.0
