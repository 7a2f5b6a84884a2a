import numpy as np
import pytest

import kvrouter as kr
from kvrouter.errors import ShapeError


def rand_vec(seed, d=16):
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.normal(size=d).astype(np.float32)


def test_position_zero_is_identity():
    x = rand_vec(0)
    assert np.array_equal(kr.rope_rotate(x, 0), x)


def test_inverse_round_trip():
    for seed in range(20):
        x = rand_vec(seed)
        p = 3 + seed * 5
        back = kr.rope_rotate(kr.rope_inverse(x, p), p)
        assert np.abs(back - x).max() < 1e-6


def test_odd_length_rejected():
    with pytest.raises(ShapeError):
        kr.rope_rotate(np.zeros(7, dtype=np.float32), 1)
    with pytest.raises(ShapeError):
        kr.rope_inverse(np.zeros(7, dtype=np.float32), 1)


def test_relative_position_invariance():
    # dot(rot(q, p1), rot(k, p2)) depends only on p1 - p2.
    rng = np.random.Generator(np.random.PCG64(123))
    for _ in range(100):
        q = rng.normal(size=16).astype(np.float32)
        k = rng.normal(size=16).astype(np.float32)
        p1, p2 = rng.integers(0, 60, size=2)
        s = int(rng.integers(0, 40))
        a = float(np.dot(kr.rope_rotate(q, int(p1)), kr.rope_rotate(k, int(p2))))
        b = float(np.dot(kr.rope_rotate(q, int(p1) + s), kr.rope_rotate(k, int(p2) + s)))
        assert abs(a - b) < 1e-5


def test_rotation_preserves_norm():
    for seed in range(10):
        x = rand_vec(seed)
        y = kr.rope_rotate(x, 17)
        assert abs(np.linalg.norm(x) - np.linalg.norm(y)) < 1e-5
