"""Decoupled diffusion transformer: condition encoder plus velocity decoder.

The encoder consumes (x_t, t, y) and produces a per-token self-condition
feature z_t. The decoder consumes (x_t, t, z_t) only; the class label never
reaches it, so any class information must travel through z_t. Both stacks
are standard pre-norm transformer blocks whose residual branches are
modulated by AdaLN-Zero: a zero-initialized linear maps the conditioning
vector to (shift, scale, gate), which makes every block the exact identity
at initialization, and a zero-initialized output projection makes the full
model emit v == 0 on the first forward pass.

Two block styles are selectable:
  baseline  - LayerNorm, plain 4x MLP, learned absolute position embeddings
  improved  - RMSNorm, SwiGLU feed-forward, rotary embeddings on q/k

The alignment teacher is a frozen random patch-convolution-plus-projection
network standing in for a large pretrained representation model; it gives
the encoder a stable per-token regression target without external weights.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import FormatError
from .numcore import Tensor, concat, silu, gelu_tanh, softmax
from .rng import substream

__all__ = [
    "ModelConfig",
    "ConditionBundle",
    "DDTModel",
    "PRESETS",
    "preset",
    "patchify",
    "unpatchify",
    "adaln_modulate",
    "layer_norm",
    "rms_norm",
    "parameter_layout",
    "teacher_layout",
    "parameter_count",
    "monolithic_parameter_count",
    "encoder_forward",
    "decoder_forward",
    "teacher_features",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int
    decoder_layers: int
    hidden_dim: int
    heads: int
    patch_size: int
    image_size: int
    channels: int
    num_classes: int
    alignment_layer: int
    block_style: str = "improved"
    teacher_dim: int = 32

    def __post_init__(self):
        for field in ("encoder_layers", "decoder_layers", "hidden_dim", "heads",
                      "patch_size", "image_size", "channels", "num_classes",
                      "teacher_dim"):
            if int(getattr(self, field)) < 1:
                raise ValueError(f"{field} must be a positive int")
        if self.hidden_dim % self.heads != 0:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.hidden_dim % 2 != 0:
            raise ValueError("hidden_dim must be even (sinusoidal embedding)")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if not 1 <= self.alignment_layer <= self.encoder_layers:
            raise ValueError("alignment_layer must lie in [1, encoder_layers]")
        if self.block_style not in ("baseline", "improved"):
            raise ValueError(f"unknown block_style {self.block_style!r}")
        if self.block_style == "improved" and (self.hidden_dim // self.heads) % 2:
            raise ValueError("improved style needs an even per-head dimension")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def null_class(self) -> int:
        return self.num_classes


def _preset_desk() -> ModelConfig:
    return ModelConfig(encoder_layers=4, decoder_layers=2, hidden_dim=64, heads=4,
                       patch_size=2, image_size=8, channels=1, num_classes=4,
                       alignment_layer=2, block_style="improved", teacher_dim=32)


def _preset_b2() -> ModelConfig:
    return ModelConfig(encoder_layers=8, decoder_layers=4, hidden_dim=768, heads=12,
                       patch_size=2, image_size=32, channels=4, num_classes=1000,
                       alignment_layer=4, block_style="improved", teacher_dim=768)


def _preset_l2() -> ModelConfig:
    return ModelConfig(encoder_layers=20, decoder_layers=4, hidden_dim=1024, heads=16,
                       patch_size=2, image_size=32, channels=4, num_classes=1000,
                       alignment_layer=10, block_style="improved", teacher_dim=768)


def _preset_xl2() -> ModelConfig:
    return ModelConfig(encoder_layers=22, decoder_layers=6, hidden_dim=1152, heads=16,
                       patch_size=2, image_size=32, channels=4, num_classes=1000,
                       alignment_layer=11, block_style="improved", teacher_dim=768)


PRESETS = {
    "desk": _preset_desk,
    "b2": _preset_b2,
    "l2": _preset_l2,
    "xl2": _preset_xl2,
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class ConditionBundle:
    """Encoder output handed to the decoder.

    t_embedding/y_embedding record the conditioning used at encode time;
    the decoder re-embeds its own current t, so reusing a bundle at a later
    timestep shares exactly the self-condition feature and nothing else.
    """
    t_embedding: Tensor
    y_embedding: Tensor
    z_t: Tensor


# ---------------------------------------------------------------------------
# token layout
# ---------------------------------------------------------------------------


def patchify(x, patch_size: int):
    """[C,H,W] or [B,C,H,W] -> [T, C*p*p] or [B, T, C*p*p], raster order."""
    tensor_in = isinstance(x, Tensor)
    t = x if tensor_in else Tensor(x)
    p = patch_size
    if t.ndim == 3:
        c, h, w = t.shape
        if h % p or w % p:
            raise ValueError(f"spatial dims {h}x{w} not divisible by patch {p}")
        out = (t.reshape(c, h // p, p, w // p, p)
                .transpose(1, 3, 0, 2, 4)
                .reshape((h // p) * (w // p), c * p * p))
    elif t.ndim == 4:
        b, c, h, w = t.shape
        if h % p or w % p:
            raise ValueError(f"spatial dims {h}x{w} not divisible by patch {p}")
        out = (t.reshape(b, c, h // p, p, w // p, p)
                .transpose(0, 2, 4, 1, 3, 5)
                .reshape(b, (h // p) * (w // p), c * p * p))
    else:
        raise ValueError(f"patchify expects rank 3 or 4, got {t.ndim}")
    return out if tensor_in else out.data


def unpatchify(tokens, patch_size: int, channels: int):
    """Inverse of patchify; token count must be a perfect square grid."""
    tensor_in = isinstance(tokens, Tensor)
    t = tokens if tensor_in else Tensor(tokens)
    p, c = patch_size, channels
    if t.ndim == 2:
        n, d = t.shape
        g = math.isqrt(n)
        if g * g != n or d != c * p * p:
            raise ValueError(f"cannot unpatchify shape {t.shape}")
        out = (t.reshape(g, g, c, p, p)
                .transpose(2, 0, 3, 1, 4)
                .reshape(c, g * p, g * p))
    elif t.ndim == 3:
        b, n, d = t.shape
        g = math.isqrt(n)
        if g * g != n or d != c * p * p:
            raise ValueError(f"cannot unpatchify shape {t.shape}")
        out = (t.reshape(b, g, g, c, p, p)
                .transpose(0, 3, 1, 4, 2, 5)
                .reshape(b, c, g * p, g * p))
    else:
        raise ValueError(f"unpatchify expects rank 2 or 3, got {t.ndim}")
    return out if tensor_in else out.data


# ---------------------------------------------------------------------------
# normalization and modulation
# ---------------------------------------------------------------------------

_NORM_EPS = 1e-6


def layer_norm(x: Tensor) -> Tensor:
    """Non-affine layer normalization over the last axis (AdaLN supplies
    the scale and shift)."""
    m = x.mean(axis=-1, keepdims=True)
    d = x - m
    var = (d * d).mean(axis=-1, keepdims=True)
    return d / (var + _NORM_EPS).sqrt()


def rms_norm(x: Tensor) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / (ms + _NORM_EPS).sqrt()


def adaln_modulate(h: Tensor, cond: Tensor, weight: Tensor, bias: Tensor,
                   branch, norm) -> Tensor:
    """One gated residual branch:

        h + gate * branch(shift + (1 + scale) * norm(h))

    (shift, scale, gate) come from a linear on silu(cond); with that linear
    zero-initialized the gate is zero and the output equals h exactly.
    cond may be per-sample [B, D] or per-token [B, T, D].
    """
    if weight.shape[0] != (cond.shape[-1] if cond.ndim else 0):
        raise ValueError(f"conditioning dim {cond.shape} does not match "
                         f"modulation weight {weight.shape}")
    m = silu(cond) @ weight + bias
    if m.ndim == h.ndim - 1:
        m = m.reshape(m.shape[0], 1, m.shape[-1])
    shift, scale, gate = m.chunk(3, axis=-1)
    return h + gate * branch(shift + (1.0 + scale) * norm(h))


# ---------------------------------------------------------------------------
# parameter layout (shared by init, counting, and checkpoint validation)
# ---------------------------------------------------------------------------


def _block_shapes(prefix: str, hidden: int, style: str) -> list[tuple[str, tuple[int, ...]]]:
    h = hidden
    shapes = [
        (f"{prefix}.attn.qkv.w", (h, 3 * h)),
        (f"{prefix}.attn.qkv.b", (3 * h,)),
        (f"{prefix}.attn.proj.w", (h, h)),
        (f"{prefix}.attn.proj.b", (h,)),
        (f"{prefix}.attn_mod.w", (h, 3 * h)),
        (f"{prefix}.attn_mod.b", (3 * h,)),
        (f"{prefix}.mlp_mod.w", (h, 3 * h)),
        (f"{prefix}.mlp_mod.b", (3 * h,)),
    ]
    if style == "baseline":
        f = 4 * h
        shapes += [
            (f"{prefix}.mlp.w1", (h, f)),
            (f"{prefix}.mlp.b1", (f,)),
            (f"{prefix}.mlp.w2", (f, h)),
            (f"{prefix}.mlp.b2", (h,)),
        ]
    else:
        f = (8 * h) // 3
        shapes += [
            (f"{prefix}.mlp.wg", (h, f)),
            (f"{prefix}.mlp.bg", (f,)),
            (f"{prefix}.mlp.w1", (h, f)),
            (f"{prefix}.mlp.b1", (f,)),
            (f"{prefix}.mlp.w2", (f, h)),
            (f"{prefix}.mlp.b2", (h,)),
        ]
    return shapes


def _stack_shapes(name: str, layers: int, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    h = cfg.hidden_dim
    shapes = [(f"{name}.embed.w", (cfg.patch_dim, h)), (f"{name}.embed.b", (h,))]
    if cfg.block_style == "baseline":
        shapes.append((f"{name}.pos", (cfg.num_tokens, h)))
    for i in range(layers):
        shapes += _block_shapes(f"{name}.b{i}", h, cfg.block_style)
    return shapes


def parameter_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every trainable parameter, in a fixed order."""
    h = cfg.hidden_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("t_mlp.w1", (h, h)),
        ("t_mlp.b1", (h,)),
        ("t_mlp.w2", (h, h)),
        ("t_mlp.b2", (h,)),
        ("y_embed.table", (cfg.num_classes + 1, h)),
    ]
    shapes += _stack_shapes("enc", cfg.encoder_layers, cfg)
    shapes += _stack_shapes("dec", cfg.decoder_layers, cfg)
    shapes += [
        ("final.mod.w", (h, 2 * h)),
        ("final.mod.b", (2 * h,)),
        ("final.proj.w", (h, cfg.patch_dim)),
        ("final.proj.b", (cfg.patch_dim,)),
        ("halign.w1", (h, h)),
        ("halign.b1", (h,)),
        ("halign.w2", (h, cfg.teacher_dim)),
        ("halign.b2", (cfg.teacher_dim,)),
    ]
    return shapes


def teacher_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = cfg.teacher_dim
    return [
        ("teacher.conv.w", (cfg.patch_dim, d)),
        ("teacher.conv.b", (d,)),
        ("teacher.proj.w", (d, d)),
        ("teacher.proj.b", (d,)),
    ]


_ZERO_INIT_SUFFIXES = ("attn_mod.w", "attn_mod.b", "mlp_mod.w", "mlp_mod.b",
                       "final.mod.w", "final.mod.b", "final.proj.w", "final.proj.b")


def parameter_count(cfg: ModelConfig) -> int:
    """Trainable parameters (teacher excluded: it is frozen and not part
    of the optimized model)."""
    return sum(int(np.prod(s)) for _, s in parameter_layout(cfg))


def monolithic_parameter_count(cfg: ModelConfig) -> int:
    """Parameter count of a single-stack transformer of the same width and
    total depth: one patch embedding, encoder_layers + decoder_layers
    identical blocks, one output head, no alignment head. The reference
    the split architecture is compared against."""
    depth = cfg.encoder_layers + cfg.decoder_layers
    h = cfg.hidden_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("t_mlp.w1", (h, h)), ("t_mlp.b1", (h,)),
        ("t_mlp.w2", (h, h)), ("t_mlp.b2", (h,)),
        ("y_embed.table", (cfg.num_classes + 1, h)),
        ("embed.w", (cfg.patch_dim, h)), ("embed.b", (h,)),
    ]
    if cfg.block_style == "baseline":
        shapes.append(("pos", (cfg.num_tokens, h)))
    for i in range(depth):
        shapes += _block_shapes(f"b{i}", h, cfg.block_style)
    shapes += [
        ("final.mod.w", (h, 2 * h)), ("final.mod.b", (2 * h,)),
        ("final.proj.w", (h, cfg.patch_dim)), ("final.proj.b", (cfg.patch_dim,)),
    ]
    return sum(int(np.prod(s)) for _, s in shapes)


# ---------------------------------------------------------------------------
# positional tables (computed, not stored)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _rope_tables(num_tokens: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = 10000.0 ** (-np.arange(half) / half)
    angles = np.arange(num_tokens)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _sinusoidal(t_vec: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of continuous t in [0,1], scaled so nearby
    timesteps stay distinguishable."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = (t_vec * 1000.0)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class DDTModel:
    """Parameter store plus pure forward functions.

    Weights live in `params` (name -> Tensor, requires_grad). The frozen
    teacher lives in `teacher` (name -> ndarray) and never enters any
    gradient computation. nfe_encoder / nfe_decoder count forward calls,
    one per batched invocation.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        for name, shape in parameter_layout(config):
            self.params[name] = Tensor(self._init_array(name, shape, seed),
                                       requires_grad=True)
        self.teacher: dict[str, np.ndarray] = {
            name: substream(seed, f"init/{name}").normal(0.0, 0.5, shape)
            for name, shape in teacher_layout(config)
        }
        self.nfe_encoder = 0
        self.nfe_decoder = 0

    @staticmethod
    def _init_array(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
        if name.endswith(_ZERO_INIT_SUFFIXES):
            return np.zeros(shape)
        if name.endswith(".b") or name.endswith((".b1", ".b2", ".bg")):
            return np.zeros(shape)
        rng = substream(seed, f"init/{name}")
        if name.endswith((".table", ".pos", "embed.w")):
            return rng.normal(0.0, 0.02, shape)
        fan_in, fan_out = shape[0], shape[-1]
        return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), shape)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "DDTModel":
        model = cls.__new__(cls)
        model.config = config
        model.params = {}
        for name, shape in parameter_layout(config):
            if name not in arrays:
                raise FormatError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise FormatError(f"parameter {name!r} has shape {arr.shape}, "
                                  f"expected {shape}")
            model.params[name] = Tensor(arr, requires_grad=True)
        model.teacher = {}
        for name, shape in teacher_layout(config):
            if name not in arrays:
                raise FormatError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise FormatError(f"parameter {name!r} has shape {arr.shape}, "
                                  f"expected {shape}")
            model.teacher[name] = arr
        model.nfe_encoder = 0
        model.nfe_decoder = 0
        return model

    # -- bookkeeping -----------------------------------------------------------

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def reset_counters(self) -> None:
        self.nfe_encoder = 0
        self.nfe_decoder = 0

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.teacher)
        return out

    # -- small layers ------------------------------------------------------------

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return x @ self.params[f"{prefix}.w"] + self.params[f"{prefix}.b"]

    def _norm(self, x: Tensor) -> Tensor:
        return rms_norm(x) if self.config.block_style == "improved" else layer_norm(x)

    def _timestep_embedding(self, t_vec: np.ndarray) -> Tensor:
        feats = Tensor(_sinusoidal(t_vec, self.config.hidden_dim))
        h = silu(feats @ self.params["t_mlp.w1"] + self.params["t_mlp.b1"])
        return h @ self.params["t_mlp.w2"] + self.params["t_mlp.b2"]

    def _label_embedding(self, y_vec: np.ndarray) -> Tensor:
        return self.params["y_embed.table"].take_rows(y_vec)

    def _attention(self, h: Tensor, prefix: str) -> Tensor:
        cfg = self.config
        b, n, _ = h.shape
        nh, dh = cfg.heads, cfg.hidden_dim // cfg.heads
        qkv = self._linear(h, f"{prefix}.attn.qkv")
        qkv = qkv.reshape(b, n, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv.chunk(3, axis=0)
        q = q.reshape(b, nh, n, dh)
        k = k.reshape(b, nh, n, dh)
        v = v.reshape(b, nh, n, dh)
        if cfg.block_style == "improved":
            q = self._rope(q)
            k = self._rope(k)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        attn = softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, cfg.hidden_dim)
        return self._linear(out, f"{prefix}.attn.proj")

    def _rope(self, x: Tensor) -> Tensor:
        cfg = self.config
        half = (cfg.hidden_dim // cfg.heads) // 2
        cos_t, sin_t = _rope_tables(cfg.num_tokens, cfg.hidden_dim // cfg.heads)
        cos = Tensor(cos_t)
        sin = Tensor(sin_t)
        x1 = x.narrow(-1, 0, half)
        x2 = x.narrow(-1, half, half)
        return concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def _mlp(self, h: Tensor, prefix: str) -> Tensor:
        p = self.params
        if self.config.block_style == "baseline":
            mid = gelu_tanh(h @ p[f"{prefix}.mlp.w1"] + p[f"{prefix}.mlp.b1"])
        else:
            gate = silu(h @ p[f"{prefix}.mlp.wg"] + p[f"{prefix}.mlp.bg"])
            mid = gate * (h @ p[f"{prefix}.mlp.w1"] + p[f"{prefix}.mlp.b1"])
        return mid @ p[f"{prefix}.mlp.w2"] + p[f"{prefix}.mlp.b2"]

    def _block(self, h: Tensor, cond: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = adaln_modulate(h, cond, p[f"{prefix}.attn_mod.w"], p[f"{prefix}.attn_mod.b"],
                           lambda x: self._attention(x, prefix), self._norm)
        h = adaln_modulate(h, cond, p[f"{prefix}.mlp_mod.w"], p[f"{prefix}.mlp_mod.b"],
                           lambda x: self._mlp(x, prefix), self._norm)
        return h

    def _tokens(self, x, stack: str) -> Tensor:
        cfg = self.config
        xt = x if isinstance(x, Tensor) else Tensor(x)
        if xt.ndim == 3:
            xt = xt.reshape(1, *xt.shape)
        if xt.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"input shape {xt.shape[1:]} does not match config "
                             f"({cfg.channels},{cfg.image_size},{cfg.image_size})")
        tok = patchify(xt, cfg.patch_size)
        tok = tok @ self.params[f"{stack}.embed.w"] + self.params[f"{stack}.embed.b"]
        if cfg.block_style == "baseline":
            tok = tok + self.params[f"{stack}.pos"]
        return tok

    # -- public forward passes ------------------------------------------------------

    def encode(self, x_t, t, y) -> tuple[ConditionBundle, Tensor]:
        """z_t = Encoder(x_t, t, y); also returns the alignment-layer tokens."""
        cfg = self.config
        tok = self._tokens(x_t, "enc")
        batch = tok.shape[0]
        t_vec = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)),
                                (batch,)).copy()
        if np.any(t_vec < 0.0) or np.any(t_vec > 1.0):
            raise ValueError(f"t must lie in [0,1], got range "
                             f"[{t_vec.min()}, {t_vec.max()}]")
        y_vec = np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=np.int64)),
                                (batch,)).copy()
        if np.any(y_vec < 0) or np.any(y_vec > cfg.null_class):
            raise ValueError(f"class index out of range [0, {cfg.null_class}]")
        t_emb = self._timestep_embedding(t_vec)
        y_emb = self._label_embedding(y_vec)
        cond = t_emb + y_emb
        h = tok
        h_align = None
        for i in range(cfg.encoder_layers):
            h = self._block(h, cond, f"enc.b{i}")
            if i + 1 == cfg.alignment_layer:
                h_align = h
        z = self._norm(h)
        self.nfe_encoder += 1
        return ConditionBundle(t_embedding=t_emb, y_embedding=y_emb, z_t=z), h_align

    def decode(self, x_t, t, bundle: ConditionBundle) -> Tensor:
        """v_t = Decoder(x_t, t, z_t). No class label enters here; the
        current t is re-embedded so a reused z stays honestly stale."""
        cfg = self.config
        tok = self._tokens(x_t, "dec")
        batch = tok.shape[0]
        z = bundle.z_t
        if z.ndim == 2:
            z = z.reshape(1, *z.shape)
        if z.shape[0] != batch or z.shape[1] != tok.shape[1]:
            raise ValueError(f"z_t shape {z.shape} does not match token "
                             f"stream {tok.shape}")
        t_vec = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)),
                                (batch,)).copy()
        if np.any(t_vec < 0.0) or np.any(t_vec > 1.0):
            raise ValueError("t must lie in [0,1]")
        t_emb = self._timestep_embedding(t_vec)
        cond = z + t_emb.reshape(batch, 1, cfg.hidden_dim)
        h = tok
        for i in range(cfg.decoder_layers):
            h = self._block(h, cond, f"dec.b{i}")
        p = self.params
        m = silu(cond) @ p["final.mod.w"] + p["final.mod.b"]
        shift, scale = m.chunk(2, axis=-1)
        h = shift + (1.0 + scale) * self._norm(h)
        out = h @ p["final.proj.w"] + p["final.proj.b"]
        v = unpatchify(out, cfg.patch_size, cfg.channels)
        self.nfe_decoder += 1
        if isinstance(x_t, Tensor):
            if x_t.ndim == 3:
                v = v.reshape(*v.shape[1:])
            return v
        return v.reshape(*v.shape[1:]) if np.ndim(x_t) == 3 else v

    def forward(self, x_t, t, y) -> Tensor:
        bundle, _ = self.encode(x_t, t, y)
        return self.decode(x_t, t, bundle)

    def teacher_features(self, x_clean) -> np.ndarray:
        """Frozen random features of the clean sample: a patch convolution
        (kernel == stride == patch size), tanh, and a linear projection."""
        x = x_clean.data if isinstance(x_clean, Tensor) else np.asarray(x_clean, float)
        tok = patchify(x, self.config.patch_size)
        tw = self.teacher
        hid = np.tanh(tok @ tw["teacher.conv.w"] + tw["teacher.conv.b"])
        return hid @ tw["teacher.proj.w"] + tw["teacher.proj.b"]

    def project_alignment(self, h_align: Tensor) -> Tensor:
        """Trainable head h_phi mapping encoder tokens to teacher space."""
        p = self.params
        mid = silu(h_align @ p["halign.w1"] + p["halign.b1"])
        return mid @ p["halign.w2"] + p["halign.b2"]


def encoder_forward(model: DDTModel, x_t, t, y):
    return model.encode(x_t, t, y)


def decoder_forward(model: DDTModel, x_t, t, bundle: ConditionBundle):
    return model.decode(x_t, t, bundle)


def teacher_features(model: DDTModel, x_clean):
    return model.teacher_features(x_clean)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DDTCKPT1"

_CONFIG_FIELDS = ("encoder_layers", "decoder_layers", "hidden_dim", "heads",
                  "patch_size", "image_size", "channels", "num_classes",
                  "alignment_layer", "block_style", "teacher_dim")


def save_checkpoint(path, config: ModelConfig, arrays: dict[str, np.ndarray]) -> None:
    """Magic, length-prefixed key=value header, then named float64 blocks."""
    header_lines = []
    for field in _CONFIG_FIELDS:
        header_lines.append(f"{field}={getattr(config, field)}")
    header = ("\n".join(header_lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.astype("<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = _read_exact(fh, header_len, "header").decode("utf-8")
        fields: dict[str, str] = {}
        for line in header.splitlines():
            if not line.strip():
                continue
            if "=" not in line:
                raise FormatError(f"malformed header line {line!r}")
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        missing = [f for f in _CONFIG_FIELDS if f not in fields]
        if missing:
            raise FormatError(f"checkpoint header missing fields {missing}")
        kwargs = {}
        for field in _CONFIG_FIELDS:
            raw = fields[field]
            kwargs[field] = raw if field == "block_style" else int(raw)
        try:
            config = ModelConfig(**kwargs)
        except ValueError as exc:
            raise FormatError(f"checkpoint header invalid: {exc}") from exc
        arrays: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("checkpoint truncated in block header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "block name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
            if rank > 16:
                raise FormatError(f"block {name!r} has implausible rank {rank}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"{name} dims"))
            count = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 8 * count, f"{name} data")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    return config, arrays


def config_with(cfg: ModelConfig, **kwargs) -> ModelConfig:
    return replace(cfg, **kwargs)
