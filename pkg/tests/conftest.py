from typing import (
    Callable,
    List,
    Sequence,
)

import numpy as np
import pytest

from ethkg import diffcore as dc
from ethkg.data import (
    HistoryWindow,
    TkgDataset,
    Vocab,
    add_inverses,
    build_snapshots,
    synth_cycle,
)
from ethkg.model import EthParams
from ethkg.system_config import EthConfig


def numeric_gradient(
    fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6
) -> np.ndarray:
    """Central finite differences of a scalar function of one array"""
    x = x.copy()
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        original = x[idx]
        x[idx] = original + step
        plus = fn(x)
        x[idx] = original - step
        minus = fn(x)
        x[idx] = original
        grad[idx] = (plus - minus) / (2.0 * step)
    return grad


def gradient_check(
    build: Callable[..., dc.Node],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    step: float = 1e-6,
) -> List[tuple]:
    """Analytic and numeric gradients of sum(build(*inputs) * W) per input.

    W is a fixed random weight tensor, so every output entry contributes.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    tape = dc.Tape()
    leaves = [tape.leaf(x, name=f"x{i}") for i, x in enumerate(inputs)]
    out = build(*leaves)
    weights = np.random.default_rng(seed).normal(size=out.shape)
    root = dc.sum_all(out * tape.constant(weights))
    dc.backward(tape, root)

    def value_at(position: int, replacement: np.ndarray) -> float:
        t = dc.Tape()
        args = [
            t.constant(replacement if j == position else x)
            for j, x in enumerate(inputs)
        ]
        return float(np.sum(build(*args).value * weights))

    pairs = []
    for i, leaf in enumerate(leaves):
        numeric = numeric_gradient(lambda x, i=i: value_at(i, x), inputs[i], step)
        pairs.append((leaf.grad, numeric))
    return pairs


def assert_gradients_match(pairs, rtol: float = 1e-4, atol: float = 1e-7) -> None:
    for analytic, numeric in pairs:
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    """Fixture for a seeded random generator"""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vocab():
    """Fixture for a 6-entity, 2-relation vocabulary"""
    return Vocab(6, 2)


@pytest.fixture
def tiny_quads():
    """Fixture for three timestamps of facts over the tiny vocabulary"""
    return np.array(
        [
            [0, 0, 1, 0],
            [1, 1, 2, 0],
            [3, 0, 4, 0],
            [2, 0, 3, 1],
            [4, 1, 5, 1],
            [5, 0, 0, 1],
            [0, 0, 2, 2],
            [1, 1, 3, 2],
            [0, 0, 4, 2],
        ],
        dtype=np.int64,
    )


@pytest.fixture
def tiny_snapshots(tiny_quads, tiny_vocab):
    """Fixture for the augmented snapshots of the tiny dataset"""
    return build_snapshots(add_inverses(tiny_quads, tiny_vocab))


@pytest.fixture
def tiny_window(tiny_snapshots):
    """Fixture for a two-snapshot history predicting the third snapshot"""
    return HistoryWindow(tuple(tiny_snapshots[:2]), tiny_snapshots[2])


@pytest.fixture
def tiny_dataset(tiny_quads, tiny_vocab):
    """Fixture for the tiny dataset split by timestamp"""
    t = tiny_quads[:, 3]
    return TkgDataset(
        tiny_vocab,
        tiny_quads[t == 0],
        tiny_quads[t == 1],
        tiny_quads[t == 2],
        name="tiny",
    )


@pytest.fixture
def small_config():
    """Fixture for a small model configuration"""
    return EthConfig(d=4, w=3, layers=2, m=2)


@pytest.fixture
def small_params(small_config, tiny_vocab):
    """Fixture for freshly initialized small parameters"""
    return EthParams.initialize(small_config, tiny_vocab, seed=7)


@pytest.fixture
def small_cycle():
    """Fixture for a short synthetic cycle dataset"""
    return synth_cycle(
        n_entities=8,
        n_relations=2,
        n_times=12,
        shift_rule=3,
        valid_times=2,
        test_times=2,
    )
