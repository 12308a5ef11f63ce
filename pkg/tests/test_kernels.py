import os
import subprocess
import sys

import numpy as np
import pytest

from cpm import _kernels_py as py
from cpm import kernels

compiled = pytest.importorskip("cpm._kernels")


def twists(rng, n, scale=1.0):
    return rng.normal(scale=scale, size=(n, 6))


def test_backends_agree_on_exp():
    xi = twists(np.random.default_rng(0), 500, 2.0)
    xi[:5, :3] = 0.0  # exact-zero rotations take the series branch
    xi[5:10, :3] *= 1e-9
    for a, b in zip(compiled.se3_exp(xi), py.se3_exp(xi)):
        assert np.abs(a - b).max() < 1e-12


def test_backends_agree_on_log():
    rng = np.random.default_rng(1)
    rot, trans = py.se3_exp(twists(rng, 500, 1.5))
    ref = rng.normal(scale=3.0, size=(500, 3))
    for r in (None, ref):
        xa, ta = compiled.se3_log(rot, trans, r)
        xb, tb = py.se3_log(rot, trans, r)
        assert np.abs(xa - xb).max() < 1e-9 and np.abs(ta - tb).max() < 1e-12


def test_backends_agree_on_min_distance():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(700, 3)), rng.normal(size=(300, 3)) + 2.0
    assert compiled.min_pair_distance(a, b) == pytest.approx(py.min_pair_distance(a, b), abs=1e-12)
    assert compiled.min_pair_distance(a, a[:1]) == 0.0
    # early exit still reports a distance below the threshold
    assert compiled.min_pair_distance(a, b, 10.0) < 10.0


def test_dispatch_prefers_compiled_and_env_forces_fallback():
    assert kernels.BACKEND == "cython"
    env = dict(os.environ, CPM_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from cpm import kernels; print(kernels.BACKEND)"], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
