"""Patch tokenization and the transformer encoder.

Images are cut into overlapping P x P windows with stride S, projected to
D-dim token embeddings, concatenated with a leading [CLS] token and M
trailing part tokens, summed with learnable position embeddings, and pushed
through L pre-norm transformer layers (multi-head self-attention plus a
GELU MLP of hidden width 4D, final layer norm).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class PatchConfig:
    """Geometry and width settings for the token pipeline."""

    H: int = 64
    W: int = 32
    C: int = 3
    P: int = 8
    S: int = 8
    D: int = 64
    M: int = 4
    L: int = 4
    heads: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.P > self.H or self.P > self.W:
            raise ValueError(f"patch side {self.P} exceeds image extent {self.H}x{self.W}")
        if self.S < 1:
            raise ValueError("stride must be >= 1")
        if self.D % self.heads != 0:
            raise ValueError(f"width {self.D} not divisible by {self.heads} heads")
        if self.n_patches < 1:
            raise ValueError("config yields zero patches")

    @property
    def n_rows(self):
        return (self.H + self.S - self.P) // self.S

    @property
    def n_cols(self):
        return (self.W + self.S - self.P) // self.S

    @property
    def n_patches(self):
        return self.n_rows * self.n_cols

    @property
    def seq_len(self):
        return 1 + self.n_patches + self.M


@dataclass
class TokenSequence:
    """Token embeddings in the fixed order [cls; patches; parts]."""

    embeddings: Tensor  # (1+N+M, D)
    n_rows: int
    n_cols: int
    n_parts: int

    @property
    def n_patches(self):
        return self.n_rows * self.n_cols

    def role(self, index):
        """Role marker for a 0-based sequence position.

        Patch (i, j), both 1-based, sits at position (i-1)*N_W + j; part
        token k (1-based) follows the patch block.
        """
        if index == 0:
            return "cls"
        if index <= self.n_patches:
            i = (index - 1) // self.n_cols + 1
            j = (index - 1) % self.n_cols + 1
            return f"patch({i},{j})"
        return f"dip({index - self.n_patches})"


@dataclass
class EncoderOutput:
    """Final-layer features split by token role."""

    f_cls: Tensor  # (D,)
    patch_features: Tensor  # (N_H, N_W, D)
    dip_features: Tensor  # (M, D)


def patch_count(H, W, P, S):
    """Number of stride-S windows: floor((H+S-P)/S) * floor((W+S-P)/S)."""
    return ((H + S - P) // S) * ((W + S - P) // S)


def patchify(image, config: PatchConfig):
    """Cut one H x W x C image into N flattened P*P*C patch rows.

    Row (i-1)*N_W + (j-1) holds the window whose top-left corner is
    ((i-1)*S, (j-1)*S), flattened in (P, P, C) row-major order.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.shape != (config.H, config.W, config.C):
        raise ValueError(f"image shape {img.shape} does not match config "
                         f"({config.H}, {config.W}, {config.C})")
    flat = patchify_batch(img[None], config)[0]
    return Tensor(flat)


def patchify_batch(images, config: PatchConfig):
    """Vectorized patch extraction for a (B, H, W, C) stack; returns ndarray."""
    P, S = config.P, config.S
    win = np.lib.stride_tricks.sliding_window_view(images, (P, P), axis=(1, 2))
    win = win[:, ::S, ::S]  # (B, N_H, N_W, C, P, P)
    win = win.transpose(0, 1, 2, 4, 5, 3)  # (B, N_H, N_W, P, P, C)
    B = images.shape[0]
    return np.ascontiguousarray(
        win.reshape(B, config.n_patches, P * P * config.C)
    ).astype(images.dtype)


def _trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_encoder_params(config: PatchConfig, rng):
    """Fresh truncated-normal parameters; returns dict name -> Tensor."""
    D, M = config.D, config.M
    patch_dim = config.P * config.P * config.C

    def tn(shape):
        return Tensor(_trunc_normal(rng, shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params = {
        "cls_token": tn((1, D)),
        "patch_proj_w": tn((patch_dim, D)),
        "patch_proj_b": zeros((D,)),
        "pos_embed": tn((config.seq_len, D)),
    }
    if M > 0:
        params["dip_tokens"] = tn((M, D))
    for l in range(config.L):
        params.update({
            f"l{l}_ln1_g": ones((D,)),
            f"l{l}_ln1_b": zeros((D,)),
            f"l{l}_wq": tn((D, D)),
            f"l{l}_bq": zeros((D,)),
            f"l{l}_wk": tn((D, D)),
            f"l{l}_bk": zeros((D,)),
            f"l{l}_wv": tn((D, D)),
            f"l{l}_bv": zeros((D,)),
            f"l{l}_wo": tn((D, D)),
            f"l{l}_bo": zeros((D,)),
            f"l{l}_ln2_g": ones((D,)),
            f"l{l}_ln2_b": zeros((D,)),
            f"l{l}_mlp_w1": tn((D, 4 * D)),
            f"l{l}_mlp_b1": zeros((4 * D,)),
            f"l{l}_mlp_w2": tn((4 * D, D)),
            f"l{l}_mlp_b2": zeros((D,)),
        })
    params["final_ln_g"] = ones((D,))
    params["final_ln_b"] = zeros((D,))
    return params


def embed(patches, params, config: PatchConfig):
    """Assemble the input sequence [cls; proj(patches); parts] + positions."""
    emb = embed_batch(_ensure_batched(patches), params, config)
    seq = ad.reshape(emb, (config.seq_len, config.D))
    return TokenSequence(seq, config.n_rows, config.n_cols, config.M)


def embed_batch(patches, params, config: PatchConfig):
    """(B, N, P*P*C) patch rows -> (B, 1+N+M, D) token embeddings."""
    B = patches.shape[0]
    proj = ad.matmul(patches, params["patch_proj_w"]) + params["patch_proj_b"]
    cls = ad.broadcast_to(params["cls_token"], (B, 1, config.D))
    parts = [cls, proj]
    if config.M > 0:
        dips = ad.reshape(params["dip_tokens"], (1, config.M, config.D))
        parts.append(ad.broadcast_to(dips, (B, config.M, config.D)))
    tokens = ad.concat(parts, axis=1)
    return tokens + params["pos_embed"]


def _attention(x, params, config, prefix):
    B, T, D = x.shape
    h = config.heads
    dh = D // h
    q = ad.matmul(x, params[f"{prefix}_wq"]) + params[f"{prefix}_bq"]
    k = ad.matmul(x, params[f"{prefix}_wk"]) + params[f"{prefix}_bk"]
    v = ad.matmul(x, params[f"{prefix}_wv"]) + params[f"{prefix}_bv"]

    def split_heads(t):
        return ad.transpose(ad.reshape(t, (B, T, h, dh)), (0, 2, 1, 3))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
    return ad.matmul(ctx, params[f"{prefix}_wo"]) + params[f"{prefix}_bo"]


def _mlp(x, params, prefix):
    hidden = ad.gelu(ad.matmul(x, params[f"{prefix}_mlp_w1"]) + params[f"{prefix}_mlp_b1"])
    return ad.matmul(hidden, params[f"{prefix}_mlp_w2"]) + params[f"{prefix}_mlp_b2"]


def encode_batch(tokens, params, config: PatchConfig, rng=None):
    """Run (B, T, D) token embeddings through the L pre-norm layers.

    Returns (f_cls, patch_features, dip_features) as
    (B, D), (B, N_H, N_W, D), (B, M, D).
    """
    z = tokens
    for l in range(config.L):
        p = f"l{l}"
        a = _attention(
            ad.layer_norm(z, params[f"{p}_ln1_g"], params[f"{p}_ln1_b"]),
            params, config, p,
        )
        if config.dropout > 0.0 and rng is not None:
            a = ad.dropout_mask(a, config.dropout, rng)
        z = z + a
        m = _mlp(ad.layer_norm(z, params[f"{p}_ln2_g"], params[f"{p}_ln2_b"]), params, p)
        if config.dropout > 0.0 and rng is not None:
            m = ad.dropout_mask(m, config.dropout, rng)
        z = z + m
    z = ad.layer_norm(z, params["final_ln_g"], params["final_ln_b"])

    N = config.n_patches
    f_cls = ad.reshape(z[:, 0:1, :], (z.shape[0], config.D))
    patch = ad.reshape(
        z[:, 1:1 + N, :], (z.shape[0], config.n_rows, config.n_cols, config.D)
    )
    if config.M > 0:
        dips = z[:, 1 + N:, :]
    else:
        dips = Tensor(np.zeros((z.shape[0], 0, config.D), dtype=z.dtype))
    return f_cls, patch, dips


def encode(tokens: TokenSequence, params, config: PatchConfig):
    """Single-image encoder pass; splits the output by token role."""
    z0 = ad.reshape(tokens.embeddings, (1, config.seq_len, config.D))
    f_cls, patch, dips = encode_batch(z0, params, config)
    return EncoderOutput(
        f_cls=ad.reshape(f_cls, (config.D,)),
        patch_features=ad.reshape(patch, (config.n_rows, config.n_cols, config.D)),
        dip_features=ad.reshape(dips, (config.M, config.D)),
    )


def _ensure_batched(patches):
    t = patches if isinstance(patches, Tensor) else Tensor(patches)
    if t.ndim == 2:
        return ad.reshape(t, (1,) + t.shape)
    return t
