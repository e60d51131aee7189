import numpy as np
import pytest

from tiny_nodule_detector.exceptions import GradcheckError
from tiny_nodule_detector.gradcheck import REGISTRY, gradcheck, run_all
from tiny_nodule_detector.tensor import Parameter, Tensor, make_result

SLOW_CHECKS = {"desk_model_loss"}


def _wrong_square(x: Tensor) -> Tensor:
    # forward x², backward claims 3x
    return make_result(x.data**2, (x,), lambda g: (g * 3.0 * x.data,))


def test_gradcheck_passes_for_correct_gradients(rng):
    x = Parameter(rng.standard_normal((3, 4)))
    report = gradcheck(lambda x: (x * x).sigmoid(), [x])
    assert report.passed
    assert report.checked == 12


def test_gradcheck_flags_wrong_gradients(rng):
    x = Parameter(rng.uniform(0.5, 1.5, size=5))
    report = gradcheck(_wrong_square, [x])
    assert not report.passed
    assert report.max_rel_error > 0.3


def test_gradcheck_subsamples_coordinates(rng):
    x = Parameter(rng.standard_normal(50))
    report = gradcheck(lambda x: x * x, [x], samples=7)
    assert report.checked == 7
    assert report.passed


def test_gradcheck_rejects_non_finite_inputs():
    with pytest.raises(GradcheckError):
        gradcheck(lambda x: x * 2.0, [Parameter(np.array([np.inf]))])


def test_run_all_rejects_unknown_names():
    with pytest.raises(KeyError):
        run_all(["no_such_check"])


def test_registry_covers_every_differentiable_building_block():
    expected = {
        "conv2d_r1",
        "conv2d_r2",
        "conv2d_r3",
        "conv2d_r5",
        "maxpool2d",
        "upsample_nearest",
        "batchnorm2d",
        "softmax_rows",
        "matmul",
        "position_attention",
        "channel_attention",
        "todb",
        "erd",
        "desk_model_loss",
    }
    assert expected <= set(REGISTRY)


@pytest.mark.parametrize(
    "name",
    [pytest.param(n, marks=pytest.mark.slow) if n in SLOW_CHECKS else n for n in sorted(REGISTRY)],
)
def test_registered_check_passes(name):
    report = run_all([name])[name]
    assert report.passed, f"{name}: max relative error {report.max_rel_error:.3e}"
