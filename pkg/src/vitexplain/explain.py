"""Token-contribution explainers: TokenTM, raw attention, rollout, Eq.-8 map.

TokenTM scores each token pair (input j, output i) by combining attention
weights with a measurement of how much each token was changed by the
sublayer's transformation:

  * length ratio  L(E_tilde_i) / L(E_i)  of transformed vs reference token,
  * NECC, a softmax over per-token cosine similarities between reference and
    transformed tokens (positive weighting that favors direction-preserving
    transformations),

multiplied into per-token transformation weights w_i. Each sublayer yields
an update map U (identity skip plus the weighted attention term); update
maps are folded left-to-right onto a contribution map initialized from the
input token lengths, and the heatmap is the [CLS] row of the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_ops as T
from .errors import InputError, ShapeError
from .grads import AttnGradSet, attention_gradients
from .model import (
    FFN,
    MHSA,
    ForwardResult,
    LayerTrace,
    ModelBundle,
    forward,
    tokenize,
)

METHODS = ("tokentm", "raw_attention", "rollout", "eq8_baseline")


@dataclass(frozen=True)
class ExplainerConfig:
    method: str = "tokentm"
    use_af: bool = True
    use_length: bool = True
    use_necc: bool = True
    depth_limit: int | None = None
    ratio_cap: float = 1e6

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.depth_limit is not None and self.depth_limit < 0:
            raise InputError("depth_limit must be non-negative")


@dataclass
class TransformWeights:
    """Diagonal transformation weights and their two per-token factors."""

    w: np.ndarray
    length_ratio: np.ndarray
    necc: np.ndarray


@dataclass
class ContributionMap:
    """Accumulated n x n influence of input tokens on sublayer outputs."""

    c: np.ndarray
    layers_applied: int

    def __post_init__(self):
        if np.any(self.c < 0):
            raise ShapeError("contribution map must stay entrywise non-negative")


def token_length(x: np.ndarray) -> float:
    """Euclidean norm of a token embedding."""
    return float(np.sqrt(np.sum(np.asarray(x, dtype=T.REAL64) ** 2)))


def necc(e_ref: np.ndarray, e_tilde: np.ndarray) -> np.ndarray:
    """Softmax over per-token cosine(reference, transformed), max-shifted.

    Tokens whose reference or transformed vector has zero norm get cosine 0.
    """
    e_ref = np.asarray(e_ref, dtype=T.REAL64)
    e_tilde = np.asarray(e_tilde, dtype=T.REAL64)
    if e_ref.shape != e_tilde.shape:
        raise ShapeError(f"necc shapes differ: {e_ref.shape} vs {e_tilde.shape}")
    na = T.row_norms(e_ref)
    nb = T.row_norms(e_tilde)
    denom = na * nb
    cos = np.divide(
        np.einsum("ij,ij->i", e_ref, e_tilde),
        np.where(denom > 0, denom, 1.0),
        where=denom > 0,
        out=np.zeros(e_ref.shape[0]),
    )
    e = np.exp(cos - cos.max())
    return e / e.sum()


def transformation_weights(
    e_ref: np.ndarray,
    e_tilde: np.ndarray,
    use_length: bool = True,
    use_necc: bool = True,
    ratio_cap: float = 1e6,
) -> TransformWeights:
    """Per-token w_i = length_ratio_i * necc_i, with disabled factors exactly 1.

    Zero-norm guard: L(E_i) == 0 gives ratio 0 when L(E_tilde_i) == 0, else
    the configurable cap (the measurement assumes nonzero tokens; the guard
    keeps aggregation finite).
    """
    e_ref = np.asarray(e_ref, dtype=T.REAL64)
    e_tilde = np.asarray(e_tilde, dtype=T.REAL64)
    if e_ref.shape != e_tilde.shape:
        raise ShapeError(f"shapes differ: {e_ref.shape} vs {e_tilde.shape}")
    n = e_ref.shape[0]
    if use_length:
        l_ref = T.row_norms(e_ref)
        l_til = T.row_norms(e_tilde)
        ratio = np.divide(l_til, np.where(l_ref > 0, l_ref, 1.0), where=l_ref > 0,
                          out=np.zeros(n))
        ratio[(l_ref == 0) & (l_til > 0)] = ratio_cap
    else:
        ratio = np.ones(n)
    nec = necc(e_ref, e_tilde) if use_necc else np.ones(n)
    return TransformWeights(w=ratio * nec, length_ratio=ratio, necc=nec)


def update_map_mhsa(
    trace: LayerTrace, grad_attn: np.ndarray, cfg: ExplainerConfig
) -> np.ndarray:
    """U = I + mean over heads of (grad_A)+ had. (A @ diag(w_head))."""
    if trace.kind != MHSA:
        raise InputError(f"expected an MHSA trace, got {trace.kind}")
    n_heads = trace.attn.shape[0]
    if grad_attn.shape != trace.attn.shape:
        raise ShapeError(
            f"gradient shape {grad_attn.shape} does not mirror attention {trace.attn.shape}"
        )
    n = trace.e_in.shape[0]
    acc = np.zeros((n, n))
    for h in range(n_heads):
        tw = transformation_weights(
            trace.e_ref, trace.e_tilde_heads[h], cfg.use_length, cfg.use_necc, cfg.ratio_cap
        )
        acc += np.maximum(grad_attn[h], 0.0) * (trace.attn[h] * tw.w[None, :])
    return np.eye(n) + acc / n_heads


def update_map_ffn(trace: LayerTrace, cfg: ExplainerConfig) -> np.ndarray:
    """U = I + diag(w); single head, identity attention, no gradient term."""
    if trace.kind != FFN:
        raise InputError(f"expected an FFN trace, got {trace.kind}")
    tw = transformation_weights(
        trace.e_ref, trace.e_tilde, cfg.use_length, cfg.use_necc, cfg.ratio_cap
    )
    return np.eye(trace.e_in.shape[0]) + np.diag(tw.w)


def eq8_map(trace: LayerTrace, grad_attn: np.ndarray) -> np.ndarray:
    """I + mean over heads of (grad_A)+ had. A  (attention-only contribution)."""
    if trace.kind != MHSA:
        raise InputError(f"expected an MHSA trace, got {trace.kind}")
    pos = np.maximum(grad_attn, 0.0)
    return np.eye(trace.e_in.shape[0]) + np.mean(pos * trace.attn, axis=0)


def aggregate(
    tokens0: np.ndarray,
    traces: list[LayerTrace],
    grads: AttnGradSet | None,
    cfg: ExplainerConfig,
) -> ContributionMap:
    """Fold update maps onto the initial contribution map, execution order.

    C^0 = diag(L(E^0_i)) when use_length is on, the identity otherwise (the
    ablation without the length measurement initializes with the identity).
    depth_limit k applies only the first k sublayers' updates. use_af off
    instead returns the single Eq.-8 map of the first MHSA layer.
    """
    n = tokens0.shape[0]
    if not cfg.use_af:
        for tr in traces:
            if tr.kind == MHSA:
                if grads is None:
                    raise InputError("eq8 baseline needs attention gradients")
                return ContributionMap(eq8_map(tr, grads.for_mhsa_index(0)), 1)
        raise InputError("eq8 baseline needs at least one attention sublayer")

    c = (
        np.diag(T.row_norms(np.asarray(tokens0, dtype=T.REAL64)))
        if cfg.use_length
        else np.eye(n)
    )
    depth = len(traces) if cfg.depth_limit is None else min(cfg.depth_limit, len(traces))
    mhsa_idx = 0
    for tr in traces[:depth]:
        if tr.kind == MHSA:
            if grads is None:
                raise InputError("MHSA update maps need attention gradients")
            u = update_map_mhsa(tr, grads.for_mhsa_index(mhsa_idx), cfg)
            mhsa_idx += 1
        else:
            u = update_map_ffn(tr, cfg)
        c = T.matmul(u, c)
    return ContributionMap(c, depth)


def extract_heatmap(c: np.ndarray | ContributionMap, cls_index: int, grid: int) -> np.ndarray:
    """[CLS] row without the [CLS] column, reshaped to grid x grid, min-max
    normalized to [0, 1]. A constant row maps to all zeros."""
    mat = c.c if isinstance(c, ContributionMap) else np.asarray(c)
    n = mat.shape[0]
    if n != 1 + grid * grid:
        raise InputError(f"{n} tokens do not fit a {grid}x{grid} patch grid")
    row = np.delete(mat[cls_index], cls_index)
    T.assert_finite(row, "heatmap")
    lo, hi = float(row.min()), float(row.max())
    if hi > lo:
        row = (row - lo) / (hi - lo)
    else:
        row = np.zeros_like(row)
    return row.reshape(grid, grid)


def rollout_map(traces: list[LayerTrace]) -> np.ndarray:
    """Product over MHSA layers of row-normalized (head-mean A + I) / 2."""
    joint = None
    for tr in traces:
        if tr.kind != MHSA:
            continue
        a = 0.5 * (np.mean(tr.attn, axis=0) + np.eye(tr.attn.shape[1]))
        a = a / a.sum(axis=1, keepdims=True)
        joint = a if joint is None else T.matmul(a, joint)
    if joint is None:
        raise InputError("rollout needs at least one attention sublayer")
    return joint


def raw_attention_map(traces: list[LayerTrace]) -> np.ndarray:
    """Head-mean attention of the last MHSA layer."""
    for tr in reversed(traces):
        if tr.kind == MHSA:
            return np.mean(tr.attn, axis=0)
    raise InputError("raw attention needs at least one attention sublayer")


@dataclass
class ExplainOutcome:
    heatmap: np.ndarray
    class_index: int
    logits: np.ndarray
    probs: np.ndarray
    forward_result: ForwardResult
    grads: AttnGradSet | None


def explain_tokens(
    bundle: ModelBundle,
    tokens: np.ndarray,
    class_c: int | None,
    cfg: ExplainerConfig,
    dtype=T.REAL64,
) -> ExplainOutcome:
    """Explain an already-tokenized input (class_c None = predicted class)."""
    fr = forward(bundle, tokens, dtype=dtype)
    c = int(np.argmax(fr.probs)) if class_c is None else int(class_c)
    if not 0 <= c < bundle.config.n_classes:
        raise InputError(f"class index {c} out of range")
    grads = None
    method = cfg.method
    if method == "eq8_baseline":
        cfg = ExplainerConfig(
            method="eq8_baseline",
            use_af=False,
            use_length=False,
            use_necc=False,
            depth_limit=cfg.depth_limit,
            ratio_cap=cfg.ratio_cap,
        )
    if method in ("tokentm", "eq8_baseline"):
        grads = attention_gradients(bundle, fr.traces, c, tokens_in=tokens)
        cmap = aggregate(tokens, fr.traces, grads, cfg)
        mat = cmap.c
    elif method == "rollout":
        mat = rollout_map(fr.traces)
    elif method == "raw_attention":
        mat = raw_attention_map(fr.traces)
    else:
        raise InputError(f"unknown method {method!r}")
    heat = extract_heatmap(mat, 0, bundle.config.grid)
    return ExplainOutcome(
        heatmap=heat, class_index=c, logits=fr.logits, probs=fr.probs,
        forward_result=fr, grads=grads,
    )


def explain(
    bundle: ModelBundle,
    image: np.ndarray,
    class_c: int | None,
    cfg: ExplainerConfig,
    dtype=T.REAL64,
) -> np.ndarray:
    """tokenize -> forward -> gradients (if needed) -> aggregate -> heatmap."""
    tokens = tokenize(bundle, image, dtype=dtype)
    return explain_tokens(bundle, tokens, class_c, cfg, dtype=dtype).heatmap
