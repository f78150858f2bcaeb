"""Miniature diffusion transformer over frame-grid tokens.

Pixel patches are linearly embedded (no VAE), task conditioning enters as a
single learned text token at grid position (0, 0), and the timestep drives
per-block scale/shift/gate modulation whose weights start at zero, so an
untrained model is the zero map. Attention is bidirectional over the full
image+text token sequence with 2D rotary position encoding on Q and K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from psdt import tensor as T
from psdt.tensor import Parameter, Tensor


class ConfigError(ValueError):
    """Model/geometry configuration violates an invariant."""


class VocabularyError(ValueError):
    """Task id outside the configured label vocabulary."""


SEG_IMAGE, SEG_CONDITION, SEG_TEXT = 0, 1, 2


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    patch_size: int = 4
    frame_size: int = 16
    grid_rows: int = 2
    grid_cols: int = 2
    task_vocab: int = 3
    rope_base: float = 10000.0
    channels: int = 1
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % (4 * self.heads) != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by 4*heads={4 * self.heads}")
        if self.grid_rows not in (2, 3) or self.grid_cols not in (2, 3) \
                or self.grid_rows * self.grid_cols not in (4, 9):
            raise ConfigError(f"grid {self.grid_rows}x{self.grid_cols} not in {{2x2, 3x3}}")
        if self.frame_size % self.patch_size != 0:
            raise ConfigError(f"frame_size {self.frame_size} not divisible by patch {self.patch_size}")
        if self.task_vocab < 1 or self.depth < 1 or self.heads < 1:
            raise ConfigError("task_vocab, depth and heads must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def image_height(self) -> int:
        return self.grid_rows * self.frame_size

    @property
    def image_width(self) -> int:
        return self.grid_cols * self.frame_size

    @property
    def patch_rows(self) -> int:
        return self.image_height // self.patch_size

    @property
    def patch_cols(self) -> int:
        return self.image_width // self.patch_size

    @property
    def n_image_tokens(self) -> int:
        return self.patch_rows * self.patch_cols

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


@dataclass
class TokenBatch:
    """[image; (condition); text] token sequence with per-token grid positions."""
    tokens: Tensor                 # (B, T, d)
    positions: np.ndarray          # (T, 2) int, (i, j) patch coordinates
    segments: np.ndarray           # (T,) int, SEG_* tags
    n_image: int
    n_text: int


@dataclass(frozen=True)
class RopeRotation:
    """Per-(token, channel-pair) cos/sin tables for one head width."""
    cos: np.ndarray                # (T, head_dim // 2)
    sin: np.ndarray


def rope_tables(positions: np.ndarray, head_dim: int, base: float,
                dtype=np.float32) -> RopeRotation:
    """2D rotary tables: the first half of each head's pairs turns with the
    row index, the second half with the column index; pair k uses frequency
    base**(-2k / (head_dim/2))."""
    if head_dim % 4 != 0:
        raise ConfigError(f"head_dim {head_dim} must be divisible by 4 for 2D rope")
    quarter = head_dim // 4
    k = np.arange(quarter, dtype=np.float64)
    freqs = base ** (-2.0 * k / (head_dim / 2.0))
    pos = np.asarray(positions, dtype=np.float64)
    ang_i = pos[:, 0:1] * freqs          # (T, quarter)
    ang_j = pos[:, 1:2] * freqs
    ang = np.concatenate([ang_i, ang_j], axis=1)
    return RopeRotation(
        cos=np.ascontiguousarray(np.cos(ang), dtype=dtype),
        sin=np.ascontiguousarray(np.sin(ang), dtype=dtype),
    )


def image_token_positions(cfg: ModelConfig) -> np.ndarray:
    """Row-major (i, j) coordinates of every patch in the full grid image."""
    ii, jj = np.meshgrid(np.arange(cfg.patch_rows), np.arange(cfg.patch_cols),
                         indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, pd = cfg.embed_dim, cfg.patch_dim
    hidden = cfg.mlp_ratio * d
    shapes: dict[str, tuple[int, ...]] = {
        "patch.weight": (d, pd),
        "patch.bias": (d,),
        "task.table": (cfg.task_vocab, d),
        "time.fc1.weight": (d, d),
        "time.fc1.bias": (d,),
        "time.fc2.weight": (d, d),
        "time.fc2.bias": (d,),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{proj}.weight"] = (d, d)
            # no bias on the key projection: a constant key shift is
            # invisible to softmax attention (null gradient direction)
            if proj != "wk":
                shapes[f"{p}.attn.{proj}.bias"] = (d,)
        shapes[f"{p}.mod.weight"] = (6 * d, d)
        shapes[f"{p}.mod.bias"] = (6 * d,)
        shapes[f"{p}.mlp.fc1.weight"] = (hidden, d)
        shapes[f"{p}.mlp.fc1.bias"] = (hidden,)
        shapes[f"{p}.mlp.fc2.weight"] = (d, hidden)
        shapes[f"{p}.mlp.fc2.bias"] = (d,)
    shapes["final.mod.weight"] = (2 * d, d)
    shapes["final.mod.bias"] = (2 * d,)
    shapes["head.weight"] = (pd, d)
    shapes["head.bias"] = (pd,)
    return shapes


_ZERO_INIT_SUFFIXES = ("mod.weight", "mod.bias", "head.weight", "head.bias")


def init_params(cfg: ModelConfig, rng: np.random.Generator,
                dtype=np.float32, std: float = 0.02) -> dict[str, Tensor]:
    """Fresh parameter dict. Modulation and head start at zero, so the model
    is the zero map at init; everything else is Gaussian(0, std)."""
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(_ZERO_INIT_SUFFIXES) or name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.normal(0.0, std, size=shape).astype(dtype)
        params[name] = Parameter(name, data)
    return params


def _linear_p(params: dict[str, Tensor], name: str, x: Tensor,
              adapters=None) -> Tensor:
    out = T.linear(x, params[f"{name}.weight"], params.get(f"{name}.bias"))
    if adapters is not None:
        delta = adapters.delta(f"{name}.weight", x)
        if delta is not None:
            out = T.add(out, delta)
    return out


# ---------------------------------------------------------------------------
# patch embedding
# ---------------------------------------------------------------------------

def patchify_raw(x: Tensor, cfg: ModelConfig) -> Tensor:
    """(B, C, H, W) -> (B, N, C*p*p), non-overlapping patches in row-major
    order over the full grid image. Pure regrouping; bit-exact inverse is
    :func:`unpatchify_raw`."""
    b, c, h, w = x.shape
    if c != cfg.channels or h != cfg.image_height or w != cfg.image_width:
        raise ConfigError(
            f"image shape {(c, h, w)} != configured "
            f"{(cfg.channels, cfg.image_height, cfg.image_width)}")
    p, pr, pc = cfg.patch_size, cfg.patch_rows, cfg.patch_cols
    x = T.reshape(x, (b, c, pr, p, pc, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, pr * pc, c * p * p))


def unpatchify_raw(tokens: Tensor, cfg: ModelConfig) -> Tensor:
    """(B, N, C*p*p) -> (B, C, H, W), exact inverse of :func:`patchify_raw`."""
    b = tokens.shape[0]
    p, pr, pc, c = cfg.patch_size, cfg.patch_rows, cfg.patch_cols, cfg.channels
    x = T.reshape(tokens, (b, pr, pc, c, p, p))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    return T.reshape(x, (b, c, pr * p, pc * p))


def patchify(params: dict[str, Tensor], cfg: ModelConfig, x) -> TokenBatch:
    """Embed a frame-grid image into the image token segment."""
    if not isinstance(x, Tensor):
        x = T.tensor(np.asarray(x, dtype=params["patch.weight"].dtype))
    raw = patchify_raw(x, cfg)
    tokens = T.linear(raw, params["patch.weight"], params["patch.bias"])
    n = cfg.n_image_tokens
    return TokenBatch(
        tokens=tokens,
        positions=image_token_positions(cfg),
        segments=np.full(n, SEG_IMAGE, dtype=np.int8),
        n_image=n,
        n_text=0,
    )


# ---------------------------------------------------------------------------
# timestep embedding
# ---------------------------------------------------------------------------

def sinusoid_features(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """[cos, sin] features of t*1000 over log-spaced frequencies."""
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * 1000.0 * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(dtype)


def timestep_embed(params: dict[str, Tensor], cfg: ModelConfig,
                   t: np.ndarray) -> Tensor:
    """Sinusoidal features of t through a 2-layer MLP -> (B, d)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError(f"timesteps must lie in [0, 1], got range [{t.min()}, {t.max()}]")
    feats = T.tensor(sinusoid_features(t, cfg.embed_dim,
                                       dtype=params["time.fc1.weight"].dtype))
    h = _linear_p(params, "time.fc1", feats)
    h = T.gelu(h)
    return _linear_p(params, "time.fc2", h)


# ---------------------------------------------------------------------------
# transformer blocks
# ---------------------------------------------------------------------------

def _modulation(params, name, cond: Tensor, d: int, n_chunks: int) -> list[Tensor]:
    """Project the conditioning vector to n_chunks per-width vectors of shape
    (B, 1, d) for broadcast over tokens."""
    b = cond.shape[0]
    vec = _linear_p(params, name, T.gelu(cond))
    return [T.reshape(vec[:, i * d:(i + 1) * d], (b, 1, d)) for i in range(n_chunks)]


def dit_block_forward(params: dict[str, Tensor], cfg: ModelConfig, idx: int,
                      x: Tensor, cond: Tensor, rot: RopeRotation,
                      adapters=None) -> Tensor:
    """One pre-norm attention + MLP block with zero-init gate modulation.

    x: (B, T, d); cond: (B, d). With the modulation weights at zero the
    block is the identity map.
    """
    p = f"blocks.{idx}"
    d = cfg.embed_dim
    shift1, scale1, gate1, shift2, scale2, gate2 = _modulation(params, f"{p}.mod", cond, d, 6)

    h = T.layer_norm(x)
    h = T.add(T.add(h, T.mul(h, scale1)), shift1)
    q = _linear_p(params, f"{p}.attn.wq", h, adapters)
    k = _linear_p(params, f"{p}.attn.wk", h, adapters)
    v = _linear_p(params, f"{p}.attn.wv", h, adapters)
    a = T.mma(q, k, v, rot.cos, rot.sin, cfg.heads)
    a = _linear_p(params, f"{p}.attn.wo", a, adapters)
    x = T.add(x, T.mul(a, gate1))

    h = T.layer_norm(x)
    h = T.add(T.add(h, T.mul(h, scale2)), shift2)
    m = _linear_p(params, f"{p}.mlp.fc1", h, adapters)
    m = T.gelu(m)
    m = _linear_p(params, f"{p}.mlp.fc2", m, adapters)
    return T.add(x, T.mul(m, gate2))


def blocks_forward(params: dict[str, Tensor], cfg: ModelConfig,
                   batch: TokenBatch, cond: Tensor, adapters=None) -> TokenBatch:
    """Run all transformer blocks over a token batch (any token order; rope
    tables are built from the batch's own positions)."""
    dtype = batch.tokens.dtype
    rot = rope_tables(batch.positions, cfg.head_dim, cfg.rope_base, dtype=dtype)
    x = batch.tokens
    for i in range(cfg.depth):
        x = dit_block_forward(params, cfg, i, x, cond, rot, adapters)
    return TokenBatch(x, batch.positions, batch.segments, batch.n_image, batch.n_text)


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def make_token_batch(params: dict[str, Tensor], cfg: ModelConfig, z_t,
                     task_ids: np.ndarray,
                     condition_tokens: np.ndarray | None = None) -> TokenBatch:
    """Assemble [image; text] tokens for a noisy grid image and task labels.

    ``condition_tokens`` optionally tags a subset of image tokens as clean
    condition tokens (boolean mask over the N image positions); the tokens
    themselves are already part of z_t (in-place conditioning).
    """
    task_ids = np.asarray(task_ids, dtype=np.int64).reshape(-1)
    if task_ids.size and (task_ids.min() < 0 or task_ids.max() >= cfg.task_vocab):
        raise VocabularyError(
            f"task id out of vocabulary 0..{cfg.task_vocab - 1}: {task_ids}")
    img = patchify(params, cfg, z_t)
    b = img.tokens.shape[0]
    text = T.reshape(T.embedding(params["task.table"], task_ids), (b, 1, cfg.embed_dim))
    tokens = T.concat([img.tokens, text], axis=1)
    positions = np.concatenate([img.positions, np.zeros((1, 2), dtype=np.int64)], axis=0)
    segments = np.concatenate([img.segments, np.array([SEG_TEXT], dtype=np.int8)])
    if condition_tokens is not None:
        mask = np.asarray(condition_tokens, dtype=bool)
        segments[:img.n_image][mask] = SEG_CONDITION
    return TokenBatch(tokens, positions, segments, img.n_image, 1)


def model_forward(params: dict[str, Tensor], cfg: ModelConfig, z_t,
                  t: np.ndarray, task_ids: np.ndarray,
                  adapters=None,
                  condition_tokens: np.ndarray | None = None) -> Tensor:
    """Velocity prediction over the full grid image.

    z_t: (B, C, H, W) noisy image (ndarray or Tensor); t: (B,) in [0, 1];
    task_ids: (B,) labels. Returns a (B, C, H, W) Tensor covering the noised
    image positions.
    """
    batch = make_token_batch(params, cfg, z_t, task_ids, condition_tokens)
    cond = timestep_embed(params, cfg, t)
    batch = blocks_forward(params, cfg, batch, cond, adapters)

    d = cfg.embed_dim
    b = batch.tokens.shape[0]
    shift, scale_m = _modulation(params, "final.mod", cond, d, 2)
    h = T.layer_norm(batch.tokens)
    h = T.add(T.add(h, T.mul(h, scale_m)), shift)
    h = h[:, :batch.n_image]
    out = T.linear(h, params["head.weight"], params["head.bias"])
    return unpatchify_raw(out, cfg)
