"""ViT forward engine with per-sublayer trace capture.

A model is a pre-LN ViT: patch embedding + [CLS] + positional embeddings,
then n_blocks of (MHSA, FFN) sublayers with skip connections, a final layer
norm on the [CLS] row and a linear classifier head.

Each sublayer output is decomposed as skip + attention-weighted transformed
tokens:

    MHSA: E_out = E_in + sum_h A_h @ E_tilde_h
    FFN:  E_out = E_in + E_tilde

and the traces record everything explainers consume: the pre-LN input E_in,
the post-LN reference E_ref (the tokens actually fed to the value/FFN
transformation), per-head attention A_h and transformed tokens E_tilde_h
(value and output-projection biases folded in, the shared output bias split
evenly across heads; attention rows sum to 1 so this is numerically the
standard formulation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .errors import InputError, ModelError

MHSA = "mhsa"
FFN = "ffn"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    patch_size: int
    d_model: int
    n_heads: int
    n_blocks: int
    d_ff: int
    n_classes: int
    layernorm_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ModelError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % self.n_heads != 0:
            raise ModelError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return 1 + self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_sublayers(self) -> int:
        return 2 * self.n_blocks


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor name -> shape required by the interchange format."""
    d, dff, c = config.d_model, config.d_ff, config.n_classes
    p3 = config.patch_size * config.patch_size * 3
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.w": (p3, d),
        "patch_embed.b": (d,),
        "cls_token": (d,),
        "pos_embed": (config.n_tokens, d),
        "norm.g": (d,),
        "norm.b": (d,),
        "head.w": (d, c),
        "head.b": (c,),
    }
    for i in range(config.n_blocks):
        pre = f"block.{i}"
        shapes[f"{pre}.ln1.g"] = (d,)
        shapes[f"{pre}.ln1.b"] = (d,)
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[f"{pre}.attn.{nm}"] = (d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            shapes[f"{pre}.attn.{nm}"] = (d,)
        shapes[f"{pre}.ln2.g"] = (d,)
        shapes[f"{pre}.ln2.b"] = (d,)
        shapes[f"{pre}.ffn.w1"] = (d, dff)
        shapes[f"{pre}.ffn.b1"] = (dff,)
        shapes[f"{pre}.ffn.w2"] = (dff, d)
        shapes[f"{pre}.ffn.b2"] = (d,)
    return shapes


@dataclass
class ModelBundle:
    """Architecture description plus named weight tensors.

    Normalization constants come from the companion config file; they default
    to identity so toy bundles built in memory work unchanged.
    """

    config: ModelConfig
    weights: dict[str, np.ndarray]
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(3))
    reference_dumps: dict = field(default_factory=dict)

    def validate(self) -> None:
        shapes = expected_shapes(self.config)
        problems = []
        for name, shape in shapes.items():
            if name not in self.weights:
                problems.append(f"missing tensor {name}")
            elif tuple(self.weights[name].shape) != shape:
                problems.append(
                    f"{name}: shape {tuple(self.weights[name].shape)} != expected {shape}"
                )
        for name in self.weights:
            if name not in shapes:
                problems.append(f"unexpected tensor {name}")
        if problems:
            raise ModelError("bundle does not match config: " + "; ".join(sorted(problems)))

    def weight(self, name: str, dtype: np.dtype) -> np.ndarray:
        try:
            return self.weights[name].astype(dtype, copy=False)
        except KeyError:
            raise ModelError(f"missing tensor {name}") from None


@dataclass
class LayerTrace:
    """Capture of one sublayer: inputs, reference tokens, attention, outputs.

    kind == "mhsa": attn is [n_heads, n, n], e_tilde_heads is [n_heads, n, d].
    kind == "ffn":  e_tilde is [n, d].
    grad_attn is filled by the gradient pass, shape mirrors attn.
    """

    kind: str
    e_in: np.ndarray
    e_ref: np.ndarray
    e_out: np.ndarray
    attn: np.ndarray | None = None
    e_tilde_heads: np.ndarray | None = None
    e_tilde: np.ndarray | None = None
    grad_attn: np.ndarray | None = None


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    traces: list[LayerTrace]


def normalize_image(image: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Per-channel (x - mean) / std on an [H, W, 3] image."""
    return (image - np.asarray(mean)) / np.asarray(std)


def tokenize(bundle: ModelBundle, image: np.ndarray, dtype=T.REAL64) -> np.ndarray:
    """Patch-embed a normalized [H, W, 3] image into [n, d] tokens.

    Row 0 is the [CLS] embedding; positional embeddings are already added.
    Patches are flattened row-major as (pixel row, pixel col, channel).
    """
    cfg = bundle.config
    image = np.asarray(image, dtype=dtype)
    if image.shape != (cfg.image_size, cfg.image_size, 3):
        raise InputError(
            f"image shape {image.shape} != expected "
            f"({cfg.image_size}, {cfg.image_size}, 3)"
        )
    g, p = cfg.grid, cfg.patch_size
    patches = (
        image.reshape(g, p, g, p, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, p * p * 3)
    )
    w = bundle.weight("patch_embed.w", dtype)
    b = bundle.weight("patch_embed.b", dtype)
    embedded = T.matmul(patches, w) + b
    tokens = np.concatenate([bundle.weight("cls_token", dtype)[None, :], embedded], axis=0)
    return tokens + bundle.weight("pos_embed", dtype)


def _mhsa_sublayer(bundle: ModelBundle, block: int, e_in: np.ndarray, dtype) -> LayerTrace:
    cfg = bundle.config
    pre = f"block.{block}"
    w = lambda nm: bundle.weight(f"{pre}.{nm}", dtype)
    e_ref = T.layernorm(e_in, w("ln1.g"), w("ln1.b"), cfg.layernorm_eps)
    n, dh, nh = e_in.shape[0], cfg.head_dim, cfg.n_heads
    wq, wk, wv, wo = w("attn.wq"), w("attn.wk"), w("attn.wv"), w("attn.wo")
    bq, bk, bv, bo = w("attn.bq"), w("attn.bk"), w("attn.bv"), w("attn.bo")
    scale = 1.0 / np.sqrt(dh)
    attn = np.empty((nh, n, n), dtype=dtype)
    tilde = np.empty((nh, n, cfg.d_model), dtype=dtype)
    out = np.array(e_in, copy=True)
    for h in range(nh):
        sl = slice(h * dh, (h + 1) * dh)
        q = T.matmul(e_ref, wq[:, sl]) + bq[sl]
        k = T.matmul(e_ref, wk[:, sl]) + bk[sl]
        attn[h] = T.softmax_rows(T.matmul(q, k.T) * scale)
        v = T.matmul(e_ref, wv[:, sl]) + bv[sl]
        tilde[h] = T.matmul(v, wo[sl, :]) + bo / nh
        out += T.matmul(attn[h], tilde[h])
    return LayerTrace(MHSA, e_in, e_ref, out, attn=attn, e_tilde_heads=tilde)


def _ffn_sublayer(bundle: ModelBundle, block: int, e_in: np.ndarray, dtype) -> LayerTrace:
    cfg = bundle.config
    pre = f"block.{block}"
    w = lambda nm: bundle.weight(f"{pre}.{nm}", dtype)
    e_ref = T.layernorm(e_in, w("ln2.g"), w("ln2.b"), cfg.layernorm_eps)
    hidden = T.gelu(T.matmul(e_ref, w("ffn.w1")) + w("ffn.b1"))
    e_tilde = T.matmul(hidden, w("ffn.w2")) + w("ffn.b2")
    return LayerTrace(FFN, e_in, e_ref, e_in + e_tilde, e_tilde=e_tilde)


def head_logits(bundle: ModelBundle, e_final: np.ndarray, dtype=T.REAL64) -> np.ndarray:
    """Final LN on the [CLS] row only, then the classifier head."""
    cfg = bundle.config
    cls = T.layernorm(
        e_final[0:1, :],
        bundle.weight("norm.g", dtype),
        bundle.weight("norm.b", dtype),
        cfg.layernorm_eps,
    )[0]
    return cls @ bundle.weight("head.w", dtype) + bundle.weight("head.b", dtype)


def forward(bundle: ModelBundle, tokens_in: np.ndarray, dtype=T.REAL64) -> ForwardResult:
    """Run the full stack, recording one LayerTrace per sublayer.

    tokens_in must include [CLS] at row 0 with positional embeddings added
    (tokenize output). traces come back in execution order, 2*n_blocks long.
    """
    cfg = bundle.config
    tokens = np.asarray(tokens_in, dtype=dtype)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.d_model:
        raise ModelError(f"token shape {tokens.shape} incompatible with d_model {cfg.d_model}")
    traces: list[LayerTrace] = []
    e = tokens
    for b in range(cfg.n_blocks):
        tr = _mhsa_sublayer(bundle, b, e, dtype)
        traces.append(tr)
        e = tr.e_out
        tr = _ffn_sublayer(bundle, b, e, dtype)
        traces.append(tr)
        e = tr.e_out
    logits = head_logits(bundle, e, dtype)
    T.assert_finite(logits, "logits")
    probs = T.softmax_vec(logits)
    return ForwardResult(logits=logits, probs=probs, traces=traces)


def residual_error(trace: LayerTrace) -> float:
    """Max abs deviation of the trace from its skip + weighted-sum identity."""
    if trace.kind == MHSA:
        recon = trace.e_in + np.einsum("hij,hjd->id", trace.attn, trace.e_tilde_heads)
    else:
        recon = trace.e_in + trace.e_tilde
    return float(np.max(np.abs(trace.e_out - recon)))
