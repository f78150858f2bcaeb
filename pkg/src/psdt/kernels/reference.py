"""Numpy reference implementations of the hot kernels.

Every function here has a twin in the compiled ``_fast`` extension with the
same signature and semantics; the test suite asserts agreement. Arrays are
C-contiguous float32 or float64 and the output dtype always matches the
input dtype.
"""

import numpy as np

BACKEND_NAME = "reference"

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def softmax_fwd(x):
    """Row softmax. x: (R, n) -> y: (R, n), max-subtracted for stability."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(dy, y):
    """dx for y = softmax(x) rowwise."""
    dot = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - dot)


def layer_norm_fwd(x, eps):
    """Affine-free layernorm over the last axis of a (R, n) array.

    Returns (xhat, inv_std) with xhat = (x - mean) * inv_std.
    """
    eps = float(eps)
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat, inv_std


def layer_norm_bwd(dxhat, xhat, inv_std):
    """dx given d(xhat); xhat, inv_std from the forward pass."""
    n = xhat.shape[1]
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    return inv_std * (dxhat - m1 - xhat * m2)


def gelu_fwd(x):
    """Tanh-approximation GELU, elementwise on a flat array."""
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(dy, x):
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def rope_fwd(x, cos, sin):
    """Rotate channel pairs of x by per-(position, pair) angles.

    x: (G, T, dh) with dh even; cos/sin: (T, dh // 2). Pair p of token t is
    (x[..., 2p], x[..., 2p+1]) rotated by the angle whose cos/sin is
    cos[t, p], sin[t, p].
    """
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def rope_bwd(dy, cos, sin):
    """Adjoint of rope_fwd: rotation by the opposite angle."""
    return rope_fwd(dy, cos, -sin)


def attention_fwd(q, k, v, scale):
    """softmax(q @ k^T * scale) @ v per leading group.

    q, k, v: (G, T, dh). Returns (out, probs) with probs: (G, T, T).
    """
    scale = float(scale)
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    probs = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(probs, v)
    return out, probs


def attention_bwd(dout, q, k, v, probs, scale):
    """Gradients of attention_fwd w.r.t. q, k, v."""
    scale = float(scale)
    dprobs = np.matmul(dout, np.swapaxes(v, -1, -2))
    dot = (dprobs * probs).sum(axis=-1, keepdims=True)
    dscores = probs * (dprobs - dot)
    dq = np.matmul(dscores, k) * scale
    dk = np.matmul(np.swapaxes(dscores, -1, -2), q) * scale
    dv = np.matmul(np.swapaxes(probs, -1, -2), dout)
    return dq, dk, dv


def adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam update on flat arrays. bc1/bc2 are the bias corrections
    1 - beta^t for the current step."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
