"""Hand-written reverse pass: d p(c) / d A_h for every recorded attention map.

The gradient target is the softmax probability of class c, not the logit.
Each attention map is read as the adjoint at the matrix used in the
sublayer's A_h @ E_tilde_h product (the map is a free variable at its
recorded value; perturbing an entry does not renormalize the row). Between
the perturbed layer and the head the network is treated as the full
function, so the adjoint flows through later layers' value paths, layer
norms, GELUs and attention softmaxes, matching central finite differences
applied to a straight-line recompute.

Everything runs in real64 regardless of the forward dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_ops as T
from .errors import InputError, ModelError
from .model import FFN, MHSA, LayerTrace, ModelBundle


@dataclass
class AttnGradSet:
    """Per-MHSA-layer gradients, aligned with the MHSA traces in order."""

    grads: list[np.ndarray]  # each [n_heads, n, n]
    target_class: int
    target_prob: float

    def for_mhsa_index(self, i: int) -> np.ndarray:
        return self.grads[i]


def _softmax_rows_backward(a: np.ndarray, da: np.ndarray) -> np.ndarray:
    # a = softmax(s) row-wise; returns ds
    return a * (da - np.sum(da * a, axis=1, keepdims=True))


def attention_gradients(
    bundle: ModelBundle,
    traces: list[LayerTrace],
    class_c: int,
    tokens_in: np.ndarray | None = None,
) -> AttnGradSet:
    """Backpropagate p(class_c) through the recorded forward.

    Fills trace.grad_attn on every MHSA trace and returns the collected set.
    tokens_in is only needed for 0-block models (head directly on [CLS]),
    where the gradient set is empty but p(c) is still reported.
    """
    cfg = bundle.config
    if not 0 <= class_c < cfg.n_classes:
        raise InputError(f"class index {class_c} out of range [0, {cfg.n_classes})")
    if len(traces) != cfg.n_sublayers:
        raise ModelError(f"expected {cfg.n_sublayers} traces, got {len(traces)}")
    dtype = T.REAL64
    w = lambda nm: bundle.weight(nm, dtype)

    if traces:
        e_final = traces[-1].e_out.astype(dtype)
    elif tokens_in is not None:
        e_final = np.asarray(tokens_in, dtype=dtype)
    else:
        raise InputError("0-block model: pass tokens_in to evaluate the head")
    cls = e_final[0]

    eps = cfg.layernorm_eps
    logits = (
        T.layernorm(cls[None, :], w("norm.g"), w("norm.b"), eps)[0] @ w("head.w")
        + w("head.b")
    )
    probs = T.softmax_vec(logits)
    p_c = float(probs[class_c])
    if not traces:
        return AttnGradSet(grads=[], target_class=class_c, target_prob=p_c)

    dlogits = p_c * (np.eye(cfg.n_classes, dtype=dtype)[class_c] - probs)
    dcls_norm = w("head.w") @ dlogits
    dcls = T.layernorm_backward(cls[None, :], w("norm.g"), eps, dcls_norm[None, :])[0]
    de = np.zeros_like(e_final)
    de[0] = dcls

    grads_rev: list[np.ndarray] = []
    nh, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    for idx in range(len(traces) - 1, -1, -1):
        tr = traces[idx]
        block = idx // 2
        pre = f"block.{block}"
        e_in = tr.e_in.astype(dtype)
        e_ref = tr.e_ref.astype(dtype)
        if tr.kind == FFN:
            h1 = T.matmul(e_ref, w(f"{pre}.ffn.w1")) + w(f"{pre}.ffn.b1")
            dhid = T.matmul(de, w(f"{pre}.ffn.w2").T) * T.gelu_grad(h1)
            dref = T.matmul(dhid, w(f"{pre}.ffn.w1").T)
            de = de + T.layernorm_backward(e_in, w(f"{pre}.ln2.g"), eps, dref)
        elif tr.kind == MHSA:
            wq, wk = w(f"{pre}.attn.wq"), w(f"{pre}.attn.wk")
            wv, wo = w(f"{pre}.attn.wv"), w(f"{pre}.attn.wo")
            bq, bk = w(f"{pre}.attn.bq"), w(f"{pre}.attn.bk")
            dref = np.zeros_like(e_ref)
            grad_attn = np.empty_like(tr.attn, dtype=dtype)
            for h in range(nh):
                sl = slice(h * dh, (h + 1) * dh)
                a_h = tr.attn[h].astype(dtype)
                tilde_h = tr.e_tilde_heads[h].astype(dtype)
                g_a = T.matmul(de, tilde_h.T)
                grad_attn[h] = g_a
                dtilde = T.matmul(a_h.T, de)
                dval = T.matmul(dtilde, wo[sl, :].T)
                dref += T.matmul(dval, wv[:, sl].T)
                # flow through this layer's own softmax into Q, K
                q = T.matmul(e_ref, wq[:, sl]) + bq[sl]
                k = T.matmul(e_ref, wk[:, sl]) + bk[sl]
                ds = _softmax_rows_backward(a_h, g_a) * scale
                dref += T.matmul(T.matmul(ds, k), wq[:, sl].T)
                dref += T.matmul(T.matmul(ds.T, q), wk[:, sl].T)
            tr.grad_attn = grad_attn
            grads_rev.append(grad_attn)
            de = de + T.layernorm_backward(e_in, w(f"{pre}.ln1.g"), eps, dref)
        else:
            raise ModelError(f"unknown trace kind {tr.kind}")

    grads = list(reversed(grads_rev))
    for g in grads:
        T.assert_finite(g, "attention gradients")
    return AttnGradSet(grads=grads, target_class=class_c, target_prob=p_c)
