import numpy as np
import pytest

from tdmfew import numeric as nm
from tdmfew.checks import (gradient_check_model, micro_episode, micro_model,
                           oracle_check)


def test_oracle_check_clean_on_small_run():
    worst = oracle_check(trials=8, seed=3)
    assert max(worst.values()) < 1e-10


def test_gradient_checker_catches_a_broken_backward(monkeypatch):
    """Negative control: corrupt one op's backward and expect a failure."""
    real_relu = nm.relu

    def bad_relu(x):
        x = nm._wrap(x)
        out = nm._result(np.maximum(x.data, 0.0), "relu", (x,))
        if out.requires_grad:
            mask = x.data > 0
            def _bw():
                nm._accum(x, out.grad * mask * 1.05)  # 5% too large
            out._backward_fn = _bw
        return out

    monkeypatch.setattr(nm, "relu", bad_relu)
    model = micro_model(seed=1, channels=4)
    episode = micro_episode(seed=1, n_query=1)
    with pytest.raises(AssertionError, match="gradient mismatch"):
        gradient_check_model(model, episode)
    monkeypatch.setattr(nm, "relu", real_relu)


def test_gradient_check_passes_on_tiny_model():
    model = micro_model(seed=2, channels=4)
    episode = micro_episode(seed=2, n_query=1)
    summary = gradient_check_model(model, episode)
    assert summary["worst_rel_error"] < 1e-3
    assert summary["parameters_checked"] > 500
