"""Multi-head scaled dot-product attention with padding masks.

No positional information anywhere: the layer is permutation-equivariant over
the length axis, which is what lets the models treat inputs as bags. Padded
key positions get an additive -1e9 logit before the softmax (their weights
underflow to exactly zero in float64); padded query rows are zeroed on output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from . import tape
from .tape import TapeTensor, glorot_uniform

PAD_LOGIT = -1e9


@dataclass
class AttentionParams:
    wq: TapeTensor
    bq: TapeTensor
    wk: TapeTensor
    bk: TapeTensor
    wv: TapeTensor
    bv: TapeTensor
    wo: TapeTensor
    bo: TapeTensor

    def named_tensors(self, prefix: str = "") -> list:
        return [
            (prefix + "wq", self.wq), (prefix + "bq", self.bq),
            (prefix + "wk", self.wk), (prefix + "bk", self.bk),
            (prefix + "wv", self.wv), (prefix + "bv", self.bv),
            (prefix + "wo", self.wo), (prefix + "bo", self.bo),
        ]


def init_attention_params(rng, d_model: int, num_heads: int, key_dim: int) -> AttentionParams:
    if num_heads < 1 or key_dim < 1:
        raise ConfigError(f"num_heads and key_dim must be >= 1, got {num_heads}, {key_dim}")
    hk = num_heads * key_dim

    def dense(fan_in, fan_out):
        w = TapeTensor(glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out), trainable=True)
        b = TapeTensor(np.zeros(fan_out), trainable=True)
        return w, b

    wq, bq = dense(d_model, hk)
    wk, bk = dense(d_model, hk)
    wv, bv = dense(d_model, hk)
    wo, bo = dense(hk, d_model)
    return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo)


def multi_head_attention(
    x,
    params: AttentionParams,
    num_heads: int,
    key_dim: int,
    pad_mask: np.ndarray | None = None,
):
    """Self-attention over x [b, L, d_model] -> [b, L, d_model].

    pad_mask [b, L] marks padding with True; padded positions neither attend
    nor get attended to, and a fully padded row comes out all zero.
    """
    if num_heads < 1 or key_dim < 1:
        raise ConfigError(f"num_heads and key_dim must be >= 1, got {num_heads}, {key_dim}")
    b, length, d_model = x.shape
    if params.wq.shape[0] != d_model:
        raise DimensionError(
            f"input feature size {d_model} does not match projection {params.wq.shape}"
        )

    def split_heads(t):
        t = tape.reshape(t, (b, length, num_heads, key_dim))
        return tape.swapaxes(t, 1, 2)

    q = split_heads(tape.matmul(x, params.wq) + params.bq)
    k = split_heads(tape.matmul(x, params.wk) + params.bk)
    v = split_heads(tape.matmul(x, params.wv) + params.bv)

    scores = tape.matmul(q, tape.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(key_dim))
    if pad_mask is not None and pad_mask.any():
        bias = np.where(pad_mask, PAD_LOGIT, 0.0)[:, None, None, :]
        scores = scores + bias
    weights = tape.softmax(scores, axis=-1)

    ctx = tape.matmul(weights, v)
    ctx = tape.reshape(tape.swapaxes(ctx, 1, 2), (b, length, num_heads * key_dim))
    out = tape.matmul(ctx, params.wo) + params.bo
    if pad_mask is not None and pad_mask.any():
        out = out * (~pad_mask).astype(out.data.dtype)[:, :, None]
    return out
