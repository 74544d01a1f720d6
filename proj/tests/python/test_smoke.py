import numpy as np
import pytest

import dynfuse


def test_conv2d_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 7))
    k = rng.standard_normal((4, 3, 3, 3))
    y = dynfuse.conv2d(x, k, 2)
    ref = np.zeros((2, 4, 3, 3))
    for r in range(3):
        for c in range(3):
            patch = x[:, :, 2 * r:2 * r + 3, 2 * c:2 * c + 3]
            ref[:, :, r, c] = np.einsum("nihw,oihw->no", patch, k)
    assert np.allclose(y, ref, rtol=0, atol=1e-12)


def test_merge_kernels_is_linear():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 2, 3, 3, 3))
    assert np.array_equal(dynfuse.merge_kernels(a, b, 1.0, 0.0), a)
    assert np.allclose(dynfuse.merge_kernels(a, b, 0.25, 0.75), 0.25 * a + 0.75 * b)


def test_cost_model_totals():
    assert dynfuse.layer_multadds("baseline", 107, 107, 3, 96, 7) == 323136576
    assert dynfuse.format_millions(dynfuse.layer_multadds("manet", 107, 107, 3, 96, 7, shared_k=3)) == "382.49M"
    base = dynfuse.reference_cost_report("baseline")
    assert dynfuse.format_millions(base["total"]) == "1376.61M"
    assert dynfuse.reference_cost_report("manet")["percent"] == "108.85%"
    assert dynfuse.reference_cost_report("dfnet")["percent"] == "100.02%"


def test_metrics():
    assert dynfuse.iou((0, 0, 2, 2), (1, 0, 2, 2)) == pytest.approx(1 / 3)
    gt = [(10.0 + i, 5.0, 8.0, 6.0) for i in range(4)]
    m = dynfuse.evaluate_pr_sr(gt, gt, 5.0)
    assert m["pr"] == 1.0 and m["sr"] == pytest.approx(1.0)


def test_gradcheck_tiny():
    assert dynfuse.gradcheck(3, "tiny") < 1e-4


def test_cli_roundtrip(tmp_path):
    code, out, _ = dynfuse.run_cli(["cost", "--out", str(tmp_path)])
    assert code == 0
    assert "1498.40M" in out
    assert (tmp_path / "cost.csv").read_text().startswith("layer,variant,multadds,percent")
    code, _, err = dynfuse.run_cli(["no-such-command"])
    assert code == 2 and "error" in err
    with pytest.raises(ValueError):
        dynfuse.merge_kernels(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 5, 5)), 0.5, 0.5)
