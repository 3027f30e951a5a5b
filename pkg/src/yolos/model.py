"""The detector: patch stem, appended [DET] tokens, pre-norm encoder stack, twin MLP heads."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .posembed import interpolate_tensor, trunc_normal


class PEScheme(enum.Enum):
    TYPE_I = "type1"
    TYPE_II = "type2"


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    width: int = 64
    heads: int = 4
    patch_size: int = 8
    det_tokens: int = 16
    num_classes: int = 3
    mlp_ratio: float = 4.0
    pe_scheme: PEScheme = PEScheme.TYPE_II
    pe_grid: tuple[int, int] = (8, 8)
    mid_pe_grid: tuple[int, int] = (8, 8)
    image_channels: int = 3
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.det_tokens < 1:
            raise ValueError(f"det_tokens must be >= 1, got {self.det_tokens}")
        if self.mlp_ratio <= 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.patch_size < 1 or self.num_classes < 1:
            raise ValueError("patch_size and num_classes must be positive")

    @property
    def hidden(self) -> int:
        return int(round(self.width * self.mlp_ratio))

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_channels


Parameters = dict  # name -> ad.Tensor, insertion-ordered


@dataclass
class DetectionOutput:
    boxes: ad.Tensor  # (..., T, 4) normalized cx, cy, w, h
    class_logits: ad.Tensor  # (..., T, K+1), last column is "no object"
    det_embeddings: ad.Tensor  # (..., T, D) after the final LayerNorm
    attention: Optional[list] = None  # per layer: (..., heads, S, S) arrays
    grid: tuple[int, int] = (0, 0)

    @property
    def num_tokens(self) -> int:
        return self.boxes.shape[-2]


# stem --------------------------------------------------------------------------

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N, P*P*C) in raster order, row-major within a patch."""
    *lead, h, w, c = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch}; pad first")
    gh, gw = h // patch, w // patch
    x = image.reshape(*lead, gh, patch, gw, patch, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(seq: np.ndarray, patch: int, grid: tuple[int, int], channels: int) -> np.ndarray:
    *lead, _, _ = seq.shape
    gh, gw = grid
    x = seq.reshape(*lead, gh, gw, patch, patch, channels)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, gh * patch, gw * patch, channels)


# parameters ----------------------------------------------------------------------

def _linear(rng, params, name, fan_in, fan_out):
    params[f"{name}.weight"] = ad.Tensor(trunc_normal(rng, (fan_in, fan_out)), requires_grad=True)
    params[f"{name}.bias"] = ad.Tensor(np.zeros(fan_out), requires_grad=True)


def _head_linear(rng, params, name, fan_in, fan_out):
    # fan-in uniform, the usual default for freshly added detection heads
    bound = 1.0 / np.sqrt(fan_in)
    params[f"{name}.weight"] = ad.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
    params[f"{name}.bias"] = ad.Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True)


def _norm(params, name, dim):
    params[f"{name}.weight"] = ad.Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.bias"] = ad.Tensor(np.zeros(dim), requires_grad=True)


def init_params(config: ModelConfig, rng: np.random.Generator) -> Parameters:
    d, t = config.width, config.det_tokens
    p: Parameters = {}
    _linear(rng, p, "patch_embed", config.patch_dim, d)
    p["det_tokens"] = ad.Tensor(trunc_normal(rng, (t, d)), requires_grad=True)
    rows, cols = config.pe_grid
    p["pos_embed"] = ad.Tensor(trunc_normal(rng, (rows * cols + t, d)), requires_grad=True)
    if config.pe_scheme is PEScheme.TYPE_I:
        mr, mc = config.mid_pe_grid
        for layer in range(1, config.depth):
            p[f"pos_embed_mid.{layer}"] = ad.Tensor(trunc_normal(rng, (mr * mc + t, d)), requires_grad=True)
    for layer in range(config.depth):
        pre = f"blocks.{layer}"
        _norm(p, f"{pre}.ln1", d)
        _linear(rng, p, f"{pre}.attn.qkv", d, 3 * d)
        _linear(rng, p, f"{pre}.attn.proj", d, d)
        _norm(p, f"{pre}.ln2", d)
        _linear(rng, p, f"{pre}.mlp.fc1", d, config.hidden)
        _linear(rng, p, f"{pre}.mlp.fc2", config.hidden, d)
    _norm(p, "norm", d)
    init_heads(config, rng, p)
    return p


def init_heads(config: ModelConfig, rng: np.random.Generator, params: Parameters) -> Parameters:
    """(Re)initialize both detector heads in place."""
    d = config.width
    for head, out in (("class_head", config.num_classes + 1), ("box_head", 4)):
        _head_linear(rng, params, f"{head}.0", d, d)
        _head_linear(rng, params, f"{head}.1", d, d)
        _head_linear(rng, params, f"{head}.2", d, out)
    return params


def count_params(params: Parameters) -> int:
    return int(sum(t.data.size for t in params.values()))


# layers ----------------------------------------------------------------------------

def _dense(x, params, name):
    return ad.add(ad.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def _layer_params(params, layer):
    pre = f"blocks.{layer}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def attention(x: ad.Tensor, lp: dict, heads: int, eps: float, capture: bool = False):
    """Multi-head self-attention on LN(x). Returns (output, attention weights or None)."""
    *lead, s, d = x.shape
    dh = d // heads
    h = ad.layernorm(x, lp["ln1.weight"], lp["ln1.bias"], eps)
    qkv = _dense(h, lp, "attn.qkv")
    qkv = ad.reshape(qkv, (*lead, s, 3, heads, dh))
    n = len(lead)
    qkv = ad.permute(qkv, (n + 1, *range(n), n + 2, n, n + 3))  # (3, ..., heads, S, dh)
    q, k, v = (ad.reshape(ad.slice_axis(qkv, 0, i, i + 1), (*lead, heads, s, dh)) for i in range(3))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores)
    out = ad.matmul(attn, v)  # (..., heads, S, dh)
    out = ad.permute(out, (*range(n), n + 1, n, n + 2))
    out = ad.reshape(out, (*lead, s, d))
    return _dense(out, lp, "attn.proj"), (attn.data if capture else None)


def mlp_block(x: ad.Tensor, lp: dict, eps: float) -> ad.Tensor:
    h = ad.layernorm(x, lp["ln2.weight"], lp["ln2.bias"], eps)
    return _dense(ad.gelu(_dense(h, lp, "mlp.fc1")), lp, "mlp.fc2")


def encoder_layer(z: ad.Tensor, layer_params: dict, heads: int, eps: float = 1e-6,
                  capture_attention: bool = False):
    """One pre-norm layer: z'' = MSA(LN(z)) + z; z' = MLP(LN(z'')) + z''."""
    a, attn = attention(z, layer_params, heads, eps, capture_attention)
    z2 = ad.add(a, z)
    return ad.add(mlp_block(z2, layer_params, eps), z2), attn


def _head(x, params, name):
    x = ad.relu(_dense(x, params, f"{name}.0"))
    x = ad.relu(_dense(x, params, f"{name}.1"))
    return _dense(x, params, f"{name}.2")


def embed(patches: np.ndarray, params: Parameters, pe: ad.Tensor) -> ad.Tensor:
    """z0 = [x_PATCH E ; x_DET] + PE, patches first."""
    tokens = _dense(ad.Tensor(patches), params, "patch_embed")
    det = params["det_tokens"]
    lead = tokens.shape[:-2]
    if lead:
        det = ad.add(ad.Tensor(np.zeros((*lead, *det.shape))), det)
    seq = ad.concat([tokens, det], axis=-2)
    if pe.shape != seq.shape[-2:]:
        raise ValueError(f"positional embedding has shape {pe.shape}, sequence needs {seq.shape[-2:]}")
    return ad.add(seq, pe)


def _pe_for(params: Parameters, key: str, stored_grid, grid, det_tokens) -> ad.Tensor:
    return interpolate_tensor(params[key], stored_grid, grid, det_tokens)


def forward(image: np.ndarray, params: Parameters, config: ModelConfig,
            capture_attention: bool = False, zero_pe: bool = False) -> DetectionOutput:
    """Run the detector on (H, W, C) or (B, H, W, C) pixels already padded to the patch size."""
    image = np.asarray(image, dtype=ad.DTYPE)
    single = image.ndim == 3
    if single:
        image = image[None]
    if image.shape[-1] != config.image_channels:
        raise ValueError(f"expected {config.image_channels} channels, got {image.shape[-1]}")
    p = config.patch_size
    grid = (image.shape[1] // p, image.shape[2] // p)
    patches = patchify(image, p)
    t = config.det_tokens

    def pe(key, stored):
        if zero_pe:
            return ad.Tensor(np.zeros((grid[0] * grid[1] + t, config.width)))
        return _pe_for(params, key, stored, grid, t)

    z = embed(patches, params, pe("pos_embed", config.pe_grid))
    maps = [] if capture_attention else None
    for layer in range(config.depth):
        if layer > 0 and config.pe_scheme is PEScheme.TYPE_I:
            z = ad.add(z, pe(f"pos_embed_mid.{layer}", config.mid_pe_grid))
        z, attn = encoder_layer(z, _layer_params(params, layer), config.heads, config.ln_eps, capture_attention)
        if capture_attention:
            maps.append(attn)
    s = z.shape[-2]
    # heads only ever see the [DET] rows
    det = ad.slice_axis(z, -2, s - t, s)
    det = ad.layernorm(det, params["norm.weight"], params["norm.bias"], config.ln_eps)
    logits = _head(det, params, "class_head")
    boxes = ad.sigmoid(_head(det, params, "box_head"))
    if single:
        logits = ad.reshape(logits, logits.shape[1:])
        boxes = ad.reshape(boxes, boxes.shape[1:])
        det = ad.reshape(det, det.shape[1:])
        if maps is not None:
            maps = [m[0] for m in maps]
    return DetectionOutput(boxes, logits, det, maps, grid)


@dataclass
class Detector:
    """A configuration bundled with its parameters."""

    config: ModelConfig
    params: Parameters = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "Detector":
        return cls(config, init_params(config, np.random.default_rng(seed)))

    def __call__(self, image, capture_attention: bool = False, zero_pe: bool = False) -> DetectionOutput:
        return forward(image, self.params, self.config, capture_attention, zero_pe)

    def predict(self, image, capture_attention: bool = False) -> DetectionOutput:
        with ad.no_grad():
            return self(image, capture_attention)

    def parameters(self):
        return list(self.params.values())


# classification mode (pre-training shaped, used only in tests) -----------------------

def init_classifier(config: ModelConfig, num_labels: int, rng: np.random.Generator) -> Parameters:
    d = config.width
    p: Parameters = {}
    _linear(rng, p, "patch_embed", config.patch_dim, d)
    p["cls_token"] = ad.Tensor(trunc_normal(rng, (1, d)), requires_grad=True)
    rows, cols = config.pe_grid
    p["pos_embed"] = ad.Tensor(trunc_normal(rng, (rows * cols + 1, d)), requires_grad=True)
    for layer in range(config.depth):
        pre = f"blocks.{layer}"
        _norm(p, f"{pre}.ln1", d)
        _linear(rng, p, f"{pre}.attn.qkv", d, 3 * d)
        _linear(rng, p, f"{pre}.attn.proj", d, d)
        _norm(p, f"{pre}.ln2", d)
        _linear(rng, p, f"{pre}.mlp.fc1", d, config.hidden)
        _linear(rng, p, f"{pre}.mlp.fc2", config.hidden, d)
    _norm(p, "norm", d)
    _linear(rng, p, "head", d, num_labels)
    return p


def classify(image: np.ndarray, params: Parameters, config: ModelConfig) -> ad.Tensor:
    """ViT classification: [CLS; patches] + PE through the encoder, head on the [CLS] row."""
    image = np.asarray(image, dtype=ad.DTYPE)
    grid = (image.shape[-3] // config.patch_size, image.shape[-2] // config.patch_size)
    tokens = _dense(ad.Tensor(patchify(image, config.patch_size)), params, "patch_embed")
    cls = params["cls_token"]
    if tokens.ndim == 3:
        cls = ad.add(ad.Tensor(np.zeros((tokens.shape[0], 1, config.width))), cls)
    z = ad.add(ad.concat([cls, tokens], axis=-2), _cls_pe(params["pos_embed"], config.pe_grid, grid))
    for layer in range(config.depth):
        z, _ = encoder_layer(z, _layer_params(params, layer), config.heads, config.ln_eps)
    z = ad.layernorm(ad.slice_axis(z, -2, 0, 1), params["norm.weight"], params["norm.bias"], config.ln_eps)
    return _dense(z, params, "head")


def _cls_pe(values, stored, grid):
    # [CLS] slot sits first in classification mode
    n = stored[0] * stored[1]
    cls = ad.slice_axis(values, 0, 0, 1)
    spatial = interpolate_tensor(ad.slice_axis(values, 0, 1, n + 1), stored, grid, 0)
    return ad.concat([cls, spatial], axis=0)
