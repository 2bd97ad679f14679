import numpy as np
import pytest

from microsleep.nn.autograd import Tensor


def relative_gradient_error(build_loss, params, h=1e-5, sample=None, seed=0):
    """Worst norm-relative error between backward() and central differences.

    `build_loss` must rebuild the loss from the current parameter values.
    When `sample` is given, only that many coordinates per parameter are
    probed (seeded), which keeps whole-model checks tractable.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for name, p in params.items():
        assert p.grad is not None, f"no gradient reached parameter {name!r}"
        analytic_full = p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        if sample is None or sample >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=sample, replace=False)
        analytic = analytic_full[idxs]
        numeric = np.empty(len(idxs))
        for j, i in enumerate(idxs):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss().data)
            flat[i] = orig - h
            down = float(build_loss().data)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-8)
        err = np.linalg.norm(analytic - numeric) / denom
        worst = max(worst, err)
        p.grad = None
    return worst


def tracked(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


@pytest.fixture(scope="session")
def tiny_sleep_cohort():
    from microsleep.synth import generate_cohort

    return generate_cohort(3, 20, "SleepStages5", seed=11)


@pytest.fixture(scope="session")
def tiny_driving_cohort():
    from microsleep.synth import generate_cohort

    return generate_cohort(
        3, 24, "MicroSleep2", class_mix={"Wake": 0.75, "MicroSleep": 0.25}, seed=12
    )
