"""Student multi-view encoders.

Three views are produced from a sample's four embedded sequences:

* text view: multi-head self-attention over token embeddings, pooled, projected
* image view: the same over patch embeddings
* cross view: bidirectional co-attention between the two aligned (clip-style)
  sequences, each direction pooled, concatenated, projected

No positional encodings are used, so attention + mean pooling is permutation
invariant over positions. All functions accept an extra leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    DimensionError,
    Parameter,
    Tensor,
    ValidationError,
    concat,
    linear,
    make_parameter,
    matmul,
    mean,
    narrow,
    parameter_seed,
    reshape,
    scale,
    softmax_temp,
    transpose,
)

SOURCE_TAGS = ("text-tokens", "image-patches", "clip-text", "clip-image")
POOLING_MODES = ("mean", "first")

_VIEW_SOURCE = {"text": "text-tokens", "image": "image-patches"}


@dataclass
class EmbeddedSequence:
    """One embedded input sequence: L positions, each a d_in-dim vector."""

    tokens: Tensor
    source_tag: str

    def __post_init__(self):
        if self.source_tag not in SOURCE_TAGS:
            raise ValidationError(f"unknown source_tag {self.source_tag!r}")
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DimensionError(
                f"sequence tokens must be (L >= 1, d_in), got {self.tokens.shape}"
            )

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class ViewFeatures:
    """The three view vectors; all share the model dimension d."""

    f_text: Tensor
    f_image: Tensor
    f_cross: Tensor

    def as_dict(self) -> dict[str, Tensor]:
        return {"text": self.f_text, "image": self.f_image, "cross": self.f_cross}


class AttentionParams:
    """Projections for one scaled dot-product attention block."""

    def __init__(self, prefix: str, d_q: int, d_kv: int, width: int, heads: int, master_seed: int):
        if width % heads != 0:
            raise ValidationError(f"{prefix}: heads={heads} must divide width={width}")
        self.width = width
        self.heads = heads

        def param(name, shape):
            full = f"{prefix}.{name}"
            return make_parameter(full, shape, "xavier_uniform", parameter_seed(master_seed, full))

        self.w_query = param("W_Q", (d_q, width))
        self.w_key = param("W_K", (d_kv, width))
        self.w_value = param("W_V", (d_kv, width))
        self.w_out = param("W_O", (width, width))

    def parameters(self) -> list[Parameter]:
        return [self.w_query, self.w_key, self.w_value, self.w_out]


def multi_head_attention(q_tokens: Tensor, kv_tokens: Tensor, params: AttentionParams) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated then mixed by W_O."""
    if q_tokens.shape[-1] != params.w_query.tensor.shape[0]:
        raise DimensionError(
            f"query dim {q_tokens.shape[-1]} does not match W_Q {params.w_query.tensor.shape}"
        )
    if kv_tokens.shape[-1] != params.w_key.tensor.shape[0]:
        raise DimensionError(
            f"key/value dim {kv_tokens.shape[-1]} does not match W_K {params.w_key.tensor.shape}"
        )
    q = matmul(q_tokens, params.w_query)
    k = matmul(kv_tokens, params.w_key)
    v = matmul(kv_tokens, params.w_value)
    d_k = params.width // params.heads
    inv_scale = 1.0 / np.sqrt(d_k)
    head_outputs = []
    for i in range(params.heads):
        lo, hi = i * d_k, (i + 1) * d_k
        q_h = narrow(q, -1, lo, hi)
        k_h = narrow(k, -1, lo, hi)
        v_h = narrow(v, -1, lo, hi)
        scores = scale(matmul(q_h, transpose(k_h)), inv_scale)
        weights = softmax_temp(scores, 1.0)
        head_outputs.append(matmul(weights, v_h))
    stacked = head_outputs[0] if params.heads == 1 else concat(head_outputs, axis=-1)
    return matmul(stacked, params.w_out)


def _pool_positions(x: Tensor, mode: str) -> Tensor:
    if mode == "mean":
        return mean(x, axis=-2)
    if mode == "first":
        first = narrow(x, -2, 0, 1)
        return reshape(first, x.shape[:-2] + (x.shape[-1],))
    raise ValidationError(f"unknown pooling mode {mode!r}")


class ViewEncoderParams:
    """All learnable parts of the three view encoders."""

    def __init__(
        self,
        d_in: dict[str, int],
        d: int,
        heads: int = 4,
        pooling: str = "mean",
        master_seed: int = 0,
    ):
        if pooling not in POOLING_MODES:
            raise ValidationError(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")
        missing = [tag for tag in SOURCE_TAGS if tag not in d_in]
        if missing:
            raise ValidationError(f"d_in missing source tags: {missing}")
        self.d_in = dict(d_in)
        self.d = d
        self.heads = heads
        self.pooling = pooling

        def proj(name, n_in):
            w_name, b_name = f"views.{name}.proj.W", f"views.{name}.proj.b"
            w = make_parameter(w_name, (n_in, d), "xavier_uniform", parameter_seed(master_seed, w_name))
            b = make_parameter(b_name, (d,), "zeros", parameter_seed(master_seed, b_name))
            return w, b

        w_text = d_in["text-tokens"]
        w_image = d_in["image-patches"]
        w_ct, w_ci = d_in["clip-text"], d_in["clip-image"]
        self.text_attn = AttentionParams("views.text.attn", w_text, w_text, w_text, heads, master_seed)
        self.image_attn = AttentionParams("views.image.attn", w_image, w_image, w_image, heads, master_seed)
        # co-attention pair: image side queries text, and vice versa
        self.cross_i2t = AttentionParams("views.cross.i2t", w_ci, w_ct, w_ci, heads, master_seed)
        self.cross_t2i = AttentionParams("views.cross.t2i", w_ct, w_ci, w_ct, heads, master_seed)
        self.text_proj = proj("text", w_text)
        self.image_proj = proj("image", w_image)
        self.cross_proj = proj("cross", w_ci + w_ct)

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for attn in (self.text_attn, self.image_attn, self.cross_i2t, self.cross_t2i):
            params.extend(attn.parameters())
        for w, b in (self.text_proj, self.image_proj, self.cross_proj):
            params.extend([w, b])
        return params


# ---------------------------------------------------------------------------
# encoder forward passes (tokens may carry a leading batch axis)


def attend_and_project(tokens: Tensor, attn: AttentionParams, proj, pooling: str) -> Tensor:
    attended = multi_head_attention(tokens, tokens, attn)
    pooled = _pool_positions(attended, pooling)
    return linear(pooled, *proj)


def co_attend_and_project(
    clip_image_tokens: Tensor, clip_text_tokens: Tensor, params: ViewEncoderParams
) -> Tensor:
    pooled_i = _pool_positions(
        multi_head_attention(clip_image_tokens, clip_text_tokens, params.cross_i2t), params.pooling
    )
    pooled_t = _pool_positions(
        multi_head_attention(clip_text_tokens, clip_image_tokens, params.cross_t2i), params.pooling
    )
    return linear(concat([pooled_i, pooled_t], axis=-1), *params.cross_proj)


def pool_and_project(tokens: Tensor, proj, pooling: str = "mean") -> Tensor:
    """Attention-free variant: pool raw tokens, then apply the view projection."""
    return linear(_pool_positions(tokens, pooling), *proj)


def co_pool_and_project(
    clip_image_tokens: Tensor, clip_text_tokens: Tensor, params: ViewEncoderParams
) -> Tensor:
    """Attention-free cross view: pool both clip sequences, concatenate, project."""
    pooled = concat(
        [
            _pool_positions(clip_image_tokens, params.pooling),
            _pool_positions(clip_text_tokens, params.pooling),
        ],
        axis=-1,
    )
    return linear(pooled, *params.cross_proj)


# ---------------------------------------------------------------------------
# per-sample ops


def self_attention_pool(seq: EmbeddedSequence, params: ViewEncoderParams, view: str) -> Tensor:
    """Encode one text or image sequence into its d-dim view vector."""
    if view not in _VIEW_SOURCE:
        raise ValidationError(f"view must be 'text' or 'image', got {view!r}")
    if seq.source_tag != _VIEW_SOURCE[view]:
        raise ValidationError(
            f"sequence tagged {seq.source_tag!r} passed to the {view} encoder"
        )
    if view == "text":
        return attend_and_project(seq.tokens, params.text_attn, params.text_proj, params.pooling)
    return attend_and_project(seq.tokens, params.image_attn, params.image_proj, params.pooling)


def co_attention(seq_a: EmbeddedSequence, seq_b: EmbeddedSequence, params: ViewEncoderParams) -> Tensor:
    """Bidirectional cross-attention between the aligned image/text sequences."""
    if seq_a.source_tag != "clip-image" or seq_b.source_tag != "clip-text":
        raise ValidationError(
            f"co_attention expects (clip-image, clip-text), got ({seq_a.source_tag!r}, {seq_b.source_tag!r})"
        )
    return co_attend_and_project(seq_a.tokens, seq_b.tokens, params)


def encode_views(
    text_seq: EmbeddedSequence,
    image_seq: EmbeddedSequence,
    clip_text_seq: EmbeddedSequence,
    clip_image_seq: EmbeddedSequence,
    params: ViewEncoderParams,
) -> ViewFeatures:
    """Run all three encoders on one sample's four sequences."""
    return ViewFeatures(
        f_text=self_attention_pool(text_seq, params, "text"),
        f_image=self_attention_pool(image_seq, params, "image"),
        f_cross=co_attention(clip_image_seq, clip_text_seq, params),
    )
