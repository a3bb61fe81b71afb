"""Vision transformer for binary window classification.

Tokenization, learned patch embedding with a class token and positions,
a pre-norm encoder stack with optional per-layer attention capture,
selective trainability for fine-tuning, and pooled feature extraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

LN_EPS = 1e-6


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    hidden_dim: int = 768
    num_layers: int = 12
    num_heads: int = 12
    mlp_dim: int = 3072
    attn_dropout: float = 0.0
    mlp_dropout: float = 0.0
    num_outputs: int = 1

    def __post_init__(self):
        counts = (self.image_size, self.patch_size, self.channels, self.hidden_dim,
                  self.num_layers, self.num_heads, self.mlp_dim, self.num_outputs)
        if any(c < 1 for c in counts):
            raise ValueError("all ViTConfig counts must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        for p in (self.attn_dropout, self.mlp_dropout):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout probability {p} outside [0, 1)")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_len(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


# canonical B/16 and L/16 dimensions, plus a desk-scale preset
PRESETS = {
    "b16": ViTConfig(224, 16, 3, 768, 12, 12, 3072),
    "l16": ViTConfig(224, 16, 3, 1024, 24, 16, 4096),
    "tiny": ViTConfig(32, 8, 3, 32, 2, 4, 64),
}


def preset_config(name: str, attn_dropout: float = 0.0, mlp_dropout: float = 0.0) -> ViTConfig:
    """Look up a preset by name ('ViT-B/16', 'b16', 'TINY', ...)."""
    key = name.lower().replace("vit-", "").replace("/", "")
    if key not in PRESETS:
        raise ValueError(f"unknown model preset {name!r}; know {sorted(PRESETS)}")
    base = PRESETS[key]
    return ViTConfig(base.image_size, base.patch_size, base.channels, base.hidden_dim,
                     base.num_layers, base.num_heads, base.mlp_dim,
                     attn_dropout, mlp_dropout, base.num_outputs)


@dataclass
class AttentionRecord:
    """Captured per-layer attention inputs and output for one forward pass.

    query/key/value have shape [batch, heads, tokens, head_dim]; attn_output
    is the post-projection sublayer output [batch, tokens, hidden].
    """

    layer_index: int
    query: Tensor
    key: Tensor
    value: Tensor
    attn_output: Tensor


@dataclass
class FreezeSpec:
    """Which trailing encoder blocks stay trainable; the head always does."""

    trainable_blocks: int | str  # count of trailing blocks, or "all"
    head_trainable: bool = True

    def __post_init__(self):
        if not self.head_trainable:
            raise ValueError("the classification head is always trainable")
        if isinstance(self.trainable_blocks, str) and self.trainable_blocks != "all":
            raise ValueError(f"trainable_blocks must be a count or 'all', got {self.trainable_blocks!r}")
        if isinstance(self.trainable_blocks, int) and self.trainable_blocks < 0:
            raise ValueError("trainable_blocks count must be non-negative")


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within two standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


class EncoderBlock:
    """Parameters of one pre-norm encoder block."""

    def __init__(self, config: ViTConfig, index: int, rng: np.random.Generator):
        h, m = config.hidden_dim, config.mlp_dim
        self.index = index
        pre = f"block{index:02d}."
        self.ln1_gamma = Parameter(np.ones(h), name=pre + "ln1.gamma")
        self.ln1_beta = Parameter(np.zeros(h), name=pre + "ln1.beta")
        self.wq = Parameter(_trunc_normal(rng, (h, h)), name=pre + "attn.wq")
        self.bq = Parameter(np.zeros(h), name=pre + "attn.bq")
        self.wk = Parameter(_trunc_normal(rng, (h, h)), name=pre + "attn.wk")
        self.bk = Parameter(np.zeros(h), name=pre + "attn.bk")
        self.wv = Parameter(_trunc_normal(rng, (h, h)), name=pre + "attn.wv")
        self.bv = Parameter(np.zeros(h), name=pre + "attn.bv")
        self.wo = Parameter(_trunc_normal(rng, (h, h)), name=pre + "attn.wo")
        self.bo = Parameter(np.zeros(h), name=pre + "attn.bo")
        self.ln2_gamma = Parameter(np.ones(h), name=pre + "ln2.gamma")
        self.ln2_beta = Parameter(np.zeros(h), name=pre + "ln2.beta")
        self.w1 = Parameter(_trunc_normal(rng, (h, m)), name=pre + "mlp.w1")
        self.b1 = Parameter(np.zeros(m), name=pre + "mlp.b1")
        self.w2 = Parameter(_trunc_normal(rng, (m, h)), name=pre + "mlp.w2")
        self.b2 = Parameter(np.zeros(h), name=pre + "mlp.b2")

    def parameters(self) -> list[Parameter]:
        return [self.ln1_gamma, self.ln1_beta,
                self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
                self.ln2_gamma, self.ln2_beta,
                self.w1, self.b1, self.w2, self.b2]


class ViTModel:
    """Full parameter set of the transformer.

    Initialization draws from ``rng`` in a fixed order (patch projection,
    positions, then per block wq, wk, wv, wo, w1, w2) so a seed pins every
    weight byte. Biases and the class token start at zero.
    """

    def __init__(self, config: ViTConfig, rng: np.random.Generator | int | None = None):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        h = config.hidden_dim
        self.patch_proj = Parameter(_trunc_normal(rng, (config.patch_len, h)),
                                    name="patch_proj.weight")
        self.patch_bias = Parameter(np.zeros(h), name="patch_proj.bias")
        self.class_token = Parameter(np.zeros(h), name="class_token")
        self.pos_embed = Parameter(_trunc_normal(rng, (config.seq_len, h)), name="pos_embed")
        self.blocks = [EncoderBlock(config, i, rng) for i in range(config.num_layers)]
        self.final_gamma = Parameter(np.ones(h), name="final_norm.gamma")
        self.final_beta = Parameter(np.zeros(h), name="final_norm.beta")
        self.head_w = Parameter(_trunc_normal(rng, (h, config.num_outputs)), name="head.weight")
        self.head_b = Parameter(np.zeros(config.num_outputs), name="head.bias")

    def parameters(self) -> list[Parameter]:
        params = [self.patch_proj, self.patch_bias, self.class_token, self.pos_embed]
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend([self.final_gamma, self.final_beta, self.head_w, self.head_b])
        return params

    def embedding_parameters(self) -> list[Parameter]:
        return [self.patch_proj, self.patch_bias, self.class_token, self.pos_embed]


def parameter_count(config: ViTConfig) -> int:
    """Total scalar parameters as a pure function of the configuration."""
    h, m = config.hidden_dim, config.mlp_dim
    block = 2 * h + 4 * (h * h + h) + 2 * h + (h * m + m) + (m * h + h)
    return (config.patch_len * h + h                 # patch projection
            + h                                      # class token
            + config.seq_len * h                     # positions
            + config.num_layers * block
            + 2 * h                                  # final norm
            + h * config.num_outputs + config.num_outputs)


# ---------------------------------------------------------------------------
# forward pieces


def patchify(image, patch_size: int) -> Tensor:
    """Cut a [C, H, W] image into rows of flattened patches.

    Row i*g+j is patch (i, j); within a row, pixels run row-major with the
    channel axis last. The patches partition the image exactly.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected [C, H, W] image, got shape {arr.shape}")
    c, height, width = arr.shape
    if height != width:
        raise ValueError(f"image must be square, got {height}x{width}")
    if height % patch_size != 0:
        raise ValueError(f"image size {height} not divisible by patch size {patch_size}")
    return Tensor._wrap(_patchify_array(arr[None], patch_size)[0])


def _patchify_array(batch: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N, patch_len] with (row, col, channel-last) flattening."""
    b, c, height, width = batch.shape
    g = height // patch_size
    hwc = np.transpose(batch, (0, 2, 3, 1))
    tiles = hwc.reshape(b, g, patch_size, g, patch_size, c)
    tiles = np.transpose(tiles, (0, 1, 3, 2, 4, 5))
    return tiles.reshape(b, g * g, patch_size * patch_size * c).copy()


def embed(patches: Tensor, model: ViTModel) -> Tensor:
    """Project patch rows, prepend the class token, add positions.

    Accepts [N, patch_len] or [B, N, patch_len]; the class token sits at
    row 0 of the output and positions are added to every row.
    """
    single = patches.ndim == 2
    if single:
        patches = ad.reshape(patches, (1,) + patches.shape)
    if patches.shape[-1] != model.config.patch_len:
        raise ValueError(
            f"patch length {patches.shape[-1]} does not match projection "
            f"input {model.config.patch_len}")
    batch = patches.shape[0]
    h = model.config.hidden_dim
    projected = ad.matmul(patches, model.patch_proj.value) + model.patch_bias.value
    cls = ad.broadcast_to(ad.reshape(model.class_token.value, (1, 1, h)), (batch, 1, h))
    tokens = ad.concat([cls, projected], axis=1) + model.pos_embed.value
    return ad.select(tokens, axis=0, index=0) if single else tokens


def mhsa_forward(tokens: Tensor, block: EncoderBlock, config: ViTConfig,
                 capture: bool = False, training: bool = False,
                 rng: np.random.Generator | None = None):
    """Multi-head self-attention sublayer on [B, T, hidden] tokens.

    Returns the out-projected result and, when capturing, an
    AttentionRecord with the per-head query/key/value blocks.
    """
    b, t, h = tokens.shape
    if h != config.hidden_dim:
        raise ValueError(f"token dim {h} does not match hidden_dim {config.hidden_dim}")
    nh, dk = config.num_heads, config.head_dim

    def heads(x):
        return ad.transpose(ad.reshape(x, (b, t, nh, dk)), (0, 2, 1, 3))

    q = heads(ad.matmul(tokens, block.wq.value) + block.bq.value)
    k = heads(ad.matmul(tokens, block.wk.value) + block.bk.value)
    v = heads(ad.matmul(tokens, block.wv.value) + block.bv.value)
    logits = ad.scale(ad.matmul(q, ad.swap_last_axes(k)), 1.0 / math.sqrt(dk))
    attn = ad.softmax_rows(logits)
    attn = ad.dropout(attn, config.attn_dropout, training, rng)
    ctx = ad.matmul(attn, v)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, h))
    out = ad.matmul(merged, block.wo.value) + block.bo.value
    record = AttentionRecord(block.index, q, k, v, out) if capture else None
    return out, record


def encoder_block_forward(tokens: Tensor, block: EncoderBlock, config: ViTConfig,
                          training: bool = False, rng: np.random.Generator | None = None,
                          capture: bool = False):
    """Pre-norm residual block: x + MHSA(LN(x)), then x + Dropout(MLP(LN(x)))."""
    normed = ad.layer_norm(tokens, block.ln1_gamma.value, block.ln1_beta.value, LN_EPS)
    attn_out, record = mhsa_forward(normed, block, config, capture, training, rng)
    x = tokens + attn_out
    normed2 = ad.layer_norm(x, block.ln2_gamma.value, block.ln2_beta.value, LN_EPS)
    hidden = ad.gelu(ad.matmul(normed2, block.w1.value) + block.b1.value)
    mlp_out = ad.matmul(hidden, block.w2.value) + block.b2.value
    mlp_out = ad.dropout(mlp_out, config.mlp_dropout, training, rng)
    return x + mlp_out, record


def _forward_pooled(batch, model: ViTModel, training: bool, capture: bool,
                    rng: np.random.Generator | None):
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    cfg = model.config
    if arr.ndim != 4 or arr.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValueError(
            f"expected batch of shape [B, {cfg.channels}, {cfg.image_size}, "
            f"{cfg.image_size}], got {arr.shape}")
    if training and rng is None:
        raise ValueError("training forward passes need an rng for dropout")
    patches = Tensor._wrap(_patchify_array(arr, cfg.patch_size))
    x = embed(patches, model)
    records = []
    for block in model.blocks:
        x, record = encoder_block_forward(x, block, cfg, training, rng, capture)
        if capture:
            records.append(record)
    cls_row = ad.select(x, axis=1, index=0)
    pooled = ad.layer_norm(cls_row, model.final_gamma.value, model.final_beta.value, LN_EPS)
    return pooled, records


def vit_forward(batch, model: ViTModel, training: bool = False, capture: bool = False,
                rng: np.random.Generator | None = None):
    """Run the classifier on [B, C, H, W] inputs.

    Returns ([B, num_outputs] logits, attention records). The record list is
    rebuilt from scratch every call: one record per encoder block when
    capturing, empty otherwise.
    """
    pooled, records = _forward_pooled(batch, model, training, capture, rng)
    logits = ad.matmul(pooled, model.head_w.value) + model.head_b.value
    return logits, records


def pooled_representation(image, model: ViTModel) -> Tensor:
    """Final-norm class-token embedding of a single [C, H, W] image."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    pooled, _ = _forward_pooled(arr[None], model, training=False, capture=False, rng=None)
    return ad.select(pooled, axis=0, index=0)


def set_trainable(model: ViTModel, spec: FreezeSpec) -> ViTModel:
    """Apply a freeze specification.

    Only the trailing ``spec.trainable_blocks`` encoder blocks keep
    gradients; the patch/position/class-token embeddings freeze whenever any
    block is frozen. The final norm and head always stay trainable. Forward
    outputs are unaffected.
    """
    n = model.config.num_layers
    if spec.trainable_blocks == "all":
        count = n
    else:
        count = int(spec.trainable_blocks)
        if count > n:
            raise ValueError(f"trainable_blocks {count} exceeds num_layers {n}")
    first_trainable = n - count
    all_trainable = spec.trainable_blocks == "all" or count == n
    for p in model.embedding_parameters():
        p.trainable = all_trainable
    for i, block in enumerate(model.blocks):
        flag = i >= first_trainable
        for p in block.parameters():
            p.trainable = flag
    for p in (model.final_gamma, model.final_beta, model.head_w, model.head_b):
        p.trainable = True
    return model
