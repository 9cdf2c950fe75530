import pytest

from sabl import gradcheck

LIGHT = [op for op in gradcheck.CHECKS if not op.endswith("_head")]


@pytest.mark.parametrize("op", LIGHT)
def test_op_gradients(op):
    assert gradcheck.run_all(seed=11, n_seeds=20, ops=[op])[op] <= gradcheck.TOL
