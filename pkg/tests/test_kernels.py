"""Compiled kernels against the numpy reference: same semantics, both
dtypes, forward and backward."""

import numpy as np
import pytest

from psdt import kernels
from psdt.kernels import reference as ref

fast = pytest.importorskip("psdt.kernels._fast",
                           reason="compiled kernels not built; reference-only install")

DTYPES = [np.float32, np.float64]


def _tol(dtype):
    return dict(rtol=2e-5, atol=2e-6) if dtype == np.float32 else dict(rtol=1e-12, atol=1e-13)


def test_backend_selected():
    assert kernels.BACKEND in ("fast", "reference")


@pytest.mark.parametrize("dtype", DTYPES)
def test_softmax_pair(dtype):
    rng = np.random.default_rng(0)
    x = np.ascontiguousarray(rng.normal(size=(6, 9)).astype(dtype) * 4)
    y_f, y_r = fast.softmax_fwd(x), ref.softmax_fwd(x)
    assert y_f.dtype == dtype
    np.testing.assert_allclose(y_f, y_r, **_tol(dtype))
    dy = np.ascontiguousarray(rng.normal(size=x.shape).astype(dtype))
    np.testing.assert_allclose(fast.softmax_bwd(dy, y_r), ref.softmax_bwd(dy, y_r),
                               **_tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
def test_layer_norm_pair(dtype):
    rng = np.random.default_rng(1)
    x = np.ascontiguousarray(rng.normal(size=(5, 16)).astype(dtype) * 3 + 1)
    xh_f, inv_f = fast.layer_norm_fwd(x, 1e-5)
    xh_r, inv_r = ref.layer_norm_fwd(x, 1e-5)
    np.testing.assert_allclose(xh_f, xh_r, **_tol(dtype))
    np.testing.assert_allclose(inv_f, inv_r, **_tol(dtype))
    dy = np.ascontiguousarray(rng.normal(size=x.shape).astype(dtype))
    np.testing.assert_allclose(fast.layer_norm_bwd(dy, xh_r, inv_r.astype(dtype)),
                               ref.layer_norm_bwd(dy, xh_r, inv_r), **_tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
def test_gelu_pair(dtype):
    rng = np.random.default_rng(2)
    x = np.ascontiguousarray(rng.normal(size=64).astype(dtype) * 2)
    np.testing.assert_allclose(fast.gelu_fwd(x), ref.gelu_fwd(x), **_tol(dtype))
    dy = np.ascontiguousarray(rng.normal(size=64).astype(dtype))
    np.testing.assert_allclose(fast.gelu_bwd(dy, x), ref.gelu_bwd(dy, x), **_tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
def test_rope_pair(dtype):
    rng = np.random.default_rng(3)
    x = np.ascontiguousarray(rng.normal(size=(4, 7, 8)).astype(dtype))
    ang = rng.uniform(0, 2 * np.pi, size=(7, 4))
    cos = np.ascontiguousarray(np.cos(ang).astype(dtype))
    sin = np.ascontiguousarray(np.sin(ang).astype(dtype))
    np.testing.assert_allclose(fast.rope_fwd(x, cos, sin), ref.rope_fwd(x, cos, sin),
                               **_tol(dtype))
    np.testing.assert_allclose(fast.rope_bwd(x, cos, sin), ref.rope_bwd(x, cos, sin),
                               **_tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
def test_attention_pair(dtype):
    rng = np.random.default_rng(4)
    q, k, v = (np.ascontiguousarray(rng.normal(size=(3, 6, 8)).astype(dtype))
               for _ in range(3))
    scale = 1.0 / np.sqrt(8)
    out_f, p_f = fast.attention_fwd(q, k, v, scale)
    out_r, p_r = ref.attention_fwd(q, k, v, scale)
    np.testing.assert_allclose(out_f, out_r, **_tol(dtype))
    np.testing.assert_allclose(p_f, p_r, **_tol(dtype))
    dout = np.ascontiguousarray(rng.normal(size=q.shape).astype(dtype))
    for a, b in zip(fast.attention_bwd(dout, q, k, v, p_r, scale),
                    ref.attention_bwd(dout, q, k, v, p_r, scale)):
        np.testing.assert_allclose(a, b, **_tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
def test_adam_pair(dtype):
    rng = np.random.default_rng(5)

    def run(mod):
        p = rng.bit_generator.state  # noqa: F841 (fixed draws below)
        loc = np.random.default_rng(9)
        param = loc.normal(size=32).astype(dtype)
        g = loc.normal(size=32).astype(dtype)
        m = np.zeros(32, dtype=dtype)
        v = np.zeros(32, dtype=dtype)
        for t in range(1, 4):
            mod.adam_step(param, g, m, v, 1e-3, 0.9, 0.999, 1e-8,
                          1 - 0.9 ** t, 1 - 0.999 ** t)
        return param, m, v

    for a, b in zip(run(fast), run(ref)):
        np.testing.assert_allclose(a, b, **_tol(dtype))


def test_pure_python_env_selects_reference(tmp_path):
    import subprocess, sys
    code = "from psdt import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True,
                         text=True, env={"PSDT_PURE_PYTHON": "1", "PATH": "/usr/bin:/bin"})
    assert out.stdout.strip() == "reference"
