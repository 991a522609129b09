import numpy as np
import pytest

import canopyheight as ch


@pytest.fixture(scope="session")
def small_world():
    return ch.generate_world(7, extent=(128, 128))


@pytest.fixture(scope="session")
def small_dataset(small_world):
    return ch.build_dataset(small_world, 1500, seed=8)


@pytest.fixture(scope="session")
def tiny_trained(small_dataset):
    """A quickly trained small network shared by tests that need plausible
    (not accurate) predictions."""
    ds = small_dataset
    tr = ds.train_indices
    patches = ch.normalize_patches(ds.patches[tr], ds.stats)
    labels = ch.normalize_labels(ds.labels[tr], ds.stats)
    params = ch.build(ch.ModelConfig(num_blocks=2, filters_per_block=12), seed=3)
    ch.train(params, patches, labels, ch.TrainConfig(iterations=300, seed=3))
    return params


def finite_difference(f, arrays, h=1e-6, probes=20, rng=None):
    """Central-difference gradient probes of scalar f(dict of float64 arrays).

    Returns the worst relative error against the analytic gradients computed
    by one taped backward pass. The oracle never touches the backward code.
    """
    from canopyheight import tensor as T

    if rng is None:
        rng = np.random.default_rng(0)
    params = {k: T.parameter(v.copy(), k, dtype=np.float64) for k, v in arrays.items()}
    loss = f(params)
    loss.backward()
    worst = 0.0
    names = list(arrays)
    for _ in range(probes):
        name = names[rng.integers(len(names))]
        idx = np.unravel_index(rng.integers(arrays[name].size), arrays[name].shape)

        def eval_at(delta):
            ps = {k: T.parameter(v.copy(), k, dtype=np.float64) for k, v in arrays.items()}
            ps[name].data[idx] += delta
            return float(f(ps).data)

        g_fd = (eval_at(h) - eval_at(-h)) / (2 * h)
        g_an = 0.0 if params[name].grad is None else float(params[name].grad[idx])
        worst = max(worst, abs(g_fd - g_an) / max(1e-8, abs(g_fd), abs(g_an)))
    return worst
