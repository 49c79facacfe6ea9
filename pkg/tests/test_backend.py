"""Backend selection plus cross-backend agreement of the kernels.

The two backends are only bit-identical for elementwise work (the SGD
update); matmul-shaped reductions accumulate in different orders, so those
comparisons are tolerance-based.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from sst import _kernels_py
from sst import backend
from sst.errors import ValidationError

try:
    from sst import _kernels as _compiled
except ImportError:
    _compiled = None

both = pytest.mark.skipif(_compiled is None, reason="compiled kernels not built")


def _random_net(seed, dims=(6, 9, 4), n=17):
    r = np.random.default_rng(seed)
    ws = [np.ascontiguousarray(r.normal(size=(a, b))) for a, b in zip(dims[:-1], dims[1:])]
    bs = [np.ascontiguousarray(r.normal(size=b)) for b in dims[1:]]
    x = np.ascontiguousarray(r.normal(size=(n, dims[0])))
    y = np.ascontiguousarray(r.integers(0, dims[-1], size=n).astype(np.int64))
    return x, ws, bs, y


def test_selected_backend_is_exposed():
    assert backend.BACKEND in ("python", "cython")
    assert hasattr(backend.kernels, "forward")


def test_env_override_python(tmp_path):
    env = dict(os.environ, SST_BACKEND="python")
    out = subprocess.run(
        [sys.executable, "-c", "import sst.backend as b; print(b.BACKEND)"],
        capture_output=True, text=True, env=env, check=True,
    )
    assert out.stdout.strip() == "python"


def test_env_override_unknown_rejected():
    env = dict(os.environ, SST_BACKEND="tpu")
    out = subprocess.run(
        [sys.executable, "-c", "import sst.backend"],
        capture_output=True, text=True, env=env,
    )
    assert out.returncode != 0
    assert "SST_BACKEND" in out.stderr


def test_num_threads_parsing(monkeypatch):
    monkeypatch.delenv("SST_THREADS", raising=False)
    assert backend.num_threads() == 1
    monkeypatch.setenv("SST_THREADS", "4")
    assert backend.num_threads() == 4
    monkeypatch.setenv("SST_THREADS", "0")
    assert backend.num_threads() == 1
    monkeypatch.setenv("SST_THREADS", "two")
    with pytest.raises(ValidationError):
        backend.num_threads()


@both
def test_forward_agrees_across_backends():
    x, ws, bs, _ = _random_net(0)
    lp, hp = _kernels_py.forward(x, ws, bs, keep_hidden=True)
    lc, hc = _compiled.forward(x, ws, bs, keep_hidden=True)
    assert np.allclose(lp, lc, rtol=0, atol=1e-12)
    for a, b in zip(hp, hc):
        assert np.allclose(a, b, rtol=0, atol=1e-12)


@both
def test_softmax_xent_agrees_across_backends():
    x, ws, bs, y = _random_net(1)
    logits, _ = _kernels_py.forward(x, ws, bs, keep_hidden=False)
    sp, gp = _kernels_py.softmax_xent(logits, y)
    sc, gc = _compiled.softmax_xent(logits, y)
    assert abs(sp - sc) < 1e-10
    assert np.allclose(gp, gc, rtol=0, atol=1e-13)


@both
def test_backward_agrees_across_backends():
    x, ws, bs, y = _random_net(2)
    logits, hidden = _kernels_py.forward(x, ws, bs, keep_hidden=True)
    _, d = _kernels_py.softmax_xent(logits, y)
    dws_p, dbs_p = _kernels_py.backward(x, ws, hidden, d)
    dws_c, dbs_c = _compiled.backward(x, ws, hidden, d)
    for a, b in zip(dws_p + dbs_p, dws_c + dbs_c):
        assert np.allclose(a, b, rtol=0, atol=1e-11)


@both
def test_sgd_update_bitwise_identical_across_backends():
    # the update is elementwise with matching association, so exact equality
    x, ws, bs, y = _random_net(3)
    grads_w = [np.full_like(w, 0.125) + 0.3 * w for w in ws]
    grads_b = [np.full_like(b, -0.25) for b in bs]
    sets = {}
    for name, kern in (("py", _kernels_py), ("cy", _compiled)):
        w2 = [w.copy() for w in ws]
        b2 = [b.copy() for b in bs]
        vw = [np.zeros_like(w) for w in ws]
        vb = [np.zeros_like(b) for b in bs]
        for _ in range(3):
            kern.sgd_update(w2, b2, vw, vb, grads_w, grads_b, 0.1, 0.9, 1e-4)
        sets[name] = (w2, b2, vw, vb)
    for arrs_py, arrs_cy in zip(sets["py"], sets["cy"]):
        for a, b in zip(arrs_py, arrs_cy):
            assert np.array_equal(a, b)


@both
def test_compiled_accepts_readonly_inputs():
    x, ws, bs, y = _random_net(4)
    for arr in (x, *ws, *bs):
        arr.setflags(write=False)
    logits, hidden = _compiled.forward(x, ws, bs, keep_hidden=True)
    _, d = _compiled.softmax_xent(logits, y)
    _compiled.backward(x, ws, hidden, d)
