/**
 * Reference forward pass for exported models, written independently of the
 * engine: conventional pre-LN ViT blocks in float64. Reference dumps record
 * its logits and tokens rounded to float32.
 */

import { ModelArch, Tensor } from "./container.js";

/** erf to near-double precision: Maclaurin series for |x| < 2.5, Lentz
 *  continued fraction for erfc beyond. */
export function erf(x: number): number {
  const ax = Math.abs(x);
  if (ax < 2.5) {
    // 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))
    let term = ax;
    let sum = ax;
    for (let n = 1; n < 60; n++) {
      term *= -(ax * ax) / n;
      const add = term / (2 * n + 1);
      sum += add;
      if (Math.abs(add) < 1e-18 * Math.abs(sum)) break;
    }
    const val = (2 / Math.sqrt(Math.PI)) * sum;
    return x < 0 ? -val : val;
  }
  // erfc(ax) = exp(-ax^2)/sqrt(pi) * 1/(ax + 1/(2ax + 2/(ax + 3/(2ax + ...))))
  let cf = 0;
  for (let k = 40; k >= 1; k--) {
    cf = k / ((k % 2 === 1 ? 2 * ax : ax) + cf);
    // descending Lentz-style evaluation: denominators alternate ax, 2ax
  }
  // note: loop above builds b_k + a_k/(...) bottom-up with a_k = k
  const erfc = (Math.exp(-ax * ax) / Math.sqrt(Math.PI)) / (ax + cf);
  const val = 1 - erfc;
  return x < 0 ? -val : val;
}

function gelu(x: number): number {
  return 0.5 * x * (1 + erf(x / Math.SQRT2));
}

type Mat = { rows: number; cols: number; v: Float64Array };

function mat(rows: number, cols: number): Mat {
  return { rows, cols, v: new Float64Array(rows * cols) };
}

function matmul(a: Mat, b: Mat): Mat {
  if (a.cols !== b.rows) throw new Error(`matmul ${a.rows}x${a.cols} @ ${b.rows}x${b.cols}`);
  const out = mat(a.rows, b.cols);
  for (let i = 0; i < a.rows; i++) {
    for (let k = 0; k < a.cols; k++) {
      const aik = a.v[i * a.cols + k];
      if (aik === 0) continue;
      for (let j = 0; j < b.cols; j++) {
        out.v[i * b.cols + j] += aik * b.v[k * b.cols + j];
      }
    }
  }
  return out;
}

function layernorm(x: Mat, g: Float64Array, b: Float64Array, eps: number): Mat {
  const out = mat(x.rows, x.cols);
  for (let i = 0; i < x.rows; i++) {
    let mean = 0;
    for (let j = 0; j < x.cols; j++) mean += x.v[i * x.cols + j];
    mean /= x.cols;
    let varr = 0;
    for (let j = 0; j < x.cols; j++) {
      const dlt = x.v[i * x.cols + j] - mean;
      varr += dlt * dlt;
    }
    varr /= x.cols;
    const inv = 1 / Math.sqrt(varr + eps);
    for (let j = 0; j < x.cols; j++) {
      out.v[i * x.cols + j] = (x.v[i * x.cols + j] - mean) * inv * g[j] + b[j];
    }
  }
  return out;
}

function softmaxRows(x: Mat): Mat {
  const out = mat(x.rows, x.cols);
  for (let i = 0; i < x.rows; i++) {
    let mx = -Infinity;
    for (let j = 0; j < x.cols; j++) mx = Math.max(mx, x.v[i * x.cols + j]);
    let sum = 0;
    for (let j = 0; j < x.cols; j++) {
      const e = Math.exp(x.v[i * x.cols + j] - mx);
      out.v[i * x.cols + j] = e;
      sum += e;
    }
    for (let j = 0; j < x.cols; j++) out.v[i * x.cols + j] /= sum;
  }
  return out;
}

export interface Weights {
  get(name: string): Float64Array;
  shape(name: string): number[];
}

export function weightsView(tensors: Map<string, Tensor>): Weights {
  return {
    get(name: string): Float64Array {
      const t = tensors.get(name);
      if (!t) throw new Error(`missing tensor ${name}`);
      return t.dtype === "f64" ? (t.data as Float64Array) : Float64Array.from(t.data);
    },
    shape(name: string): number[] {
      const t = tensors.get(name);
      if (!t) throw new Error(`missing tensor ${name}`);
      return t.shape;
    },
  };
}

/** Patch embed + [CLS] + positional embeddings; flatten order is
 * (pixel row, pixel col, channel) within each patch, matching the engine. */
export function tokenize(arch: ModelArch, w: Weights, imageRgb01: Float64Array,
                         mean: number[], std: number[]): Mat {
  const size = arch.image_size;
  const p = arch.patch_size;
  const grid = size / p;
  const d = arch.d_model;
  const pw = w.get("patch_embed.w");
  const pb = w.get("patch_embed.b");
  const pos = w.get("pos_embed");
  const cls = w.get("cls_token");
  const n = 1 + grid * grid;
  const tokens = mat(n, d);
  for (let j = 0; j < d; j++) tokens.v[j] = cls[j] + pos[j];
  const p3 = p * p * 3;
  for (let gy = 0; gy < grid; gy++) {
    for (let gx = 0; gx < grid; gx++) {
      const ti = 1 + gy * grid + gx;
      for (let j = 0; j < d; j++) {
        let acc = pb[j];
        for (let py = 0; py < p; py++) {
          for (let px = 0; px < p; px++) {
            for (let c = 0; c < 3; c++) {
              const pixel =
                (imageRgb01[((gy * p + py) * size + gx * p + px) * 3 + c] - mean[c]) / std[c];
              acc += pixel * pw[((py * p + px) * 3 + c) * d + j];
            }
          }
        }
        tokens.v[ti * d + j] = acc + pos[ti * d + j];
      }
    }
  }
  return tokens;
}

export interface ForwardOutput {
  logits: Float64Array;
  tokens: Float64Array; // tokenize output, row-major [n, d]
}

export function forward(arch: ModelArch, w: Weights, imageRgb01: Float64Array,
                        mean: number[], std: number[]): ForwardOutput {
  const d = arch.d_model;
  const nh = arch.n_heads;
  const dh = d / nh;
  const eps = arch.layernorm_eps;
  const tokens = tokenize(arch, w, imageRgb01, mean, std);
  const n = tokens.rows;
  let e = tokens;

  const slice = (m: Float64Array, rows: number, cols: number, c0: number, cw: number): Mat => {
    const out = mat(rows, cw);
    for (let i = 0; i < rows; i++) {
      for (let j = 0; j < cw; j++) out.v[i * cw + j] = m[i * cols + (c0 + j)];
    }
    return out;
  };

  for (let blk = 0; blk < arch.n_blocks; blk++) {
    const name = (nm: string) => `block.${blk}.${nm}`;
    const x = layernorm(e, w.get(name("ln1.g")), w.get(name("ln1.b")), eps);
    const wq = { rows: d, cols: d, v: w.get(name("attn.wq")) };
    const wk = { rows: d, cols: d, v: w.get(name("attn.wk")) };
    const wv = { rows: d, cols: d, v: w.get(name("attn.wv")) };
    const wo = { rows: d, cols: d, v: w.get(name("attn.wo")) };
    const bq = w.get(name("attn.bq"));
    const bk = w.get(name("attn.bk"));
    const bv = w.get(name("attn.bv"));
    const bo = w.get(name("attn.bo"));
    const q = matmul(x, wq);
    const k = matmul(x, wk);
    const v = matmul(x, wv);
    for (let i = 0; i < n; i++) {
      for (let j = 0; j < d; j++) {
        q.v[i * d + j] += bq[j];
        k.v[i * d + j] += bk[j];
        v.v[i * d + j] += bv[j];
      }
    }
    const ctx = mat(n, d);
    for (let h = 0; h < nh; h++) {
      const qh = slice(q.v, n, d, h * dh, dh);
      const kh = slice(k.v, n, d, h * dh, dh);
      const vh = slice(v.v, n, d, h * dh, dh);
      const scores = mat(n, n);
      const scale = 1 / Math.sqrt(dh);
      for (let i = 0; i < n; i++) {
        for (let j = 0; j < n; j++) {
          let acc = 0;
          for (let t = 0; t < dh; t++) acc += qh.v[i * dh + t] * kh.v[j * dh + t];
          scores.v[i * n + j] = acc * scale;
        }
      }
      const a = softmaxRows(scores);
      const ch = matmul(a, vh);
      for (let i = 0; i < n; i++) {
        for (let t = 0; t < dh; t++) ctx.v[i * d + h * dh + t] = ch.v[i * dh + t];
      }
    }
    const proj = matmul(ctx, wo);
    const e2 = mat(n, d);
    for (let i = 0; i < n * d; i++) e2.v[i] = e.v[i] + proj.v[i] + bo[i % d];

    const y = layernorm(e2, w.get(name("ln2.g")), w.get(name("ln2.b")), eps);
    const w1 = { rows: d, cols: arch.d_ff, v: w.get(name("ffn.w1")) };
    const w2 = { rows: arch.d_ff, cols: d, v: w.get(name("ffn.w2")) };
    const b1 = w.get(name("ffn.b1"));
    const b2 = w.get(name("ffn.b2"));
    const h1 = matmul(y, w1);
    for (let i = 0; i < n; i++) {
      for (let j = 0; j < arch.d_ff; j++) {
        h1.v[i * arch.d_ff + j] = gelu(h1.v[i * arch.d_ff + j] + b1[j]);
      }
    }
    const f = matmul(h1, w2);
    const e3 = mat(n, d);
    for (let i = 0; i < n * d; i++) e3.v[i] = e2.v[i] + f.v[i] + b2[i % d];
    e = e3;
  }

  const clsRow = mat(1, d);
  for (let j = 0; j < d; j++) clsRow.v[j] = e.v[j];
  const normed = layernorm(clsRow, w.get("norm.g"), w.get("norm.b"), eps);
  const hw = { rows: d, cols: arch.n_classes, v: w.get("head.w") };
  const logitsMat = matmul(normed, hw);
  const hb = w.get("head.b");
  const logits = new Float64Array(arch.n_classes);
  for (let c = 0; c < arch.n_classes; c++) logits[c] = logitsMat.v[c] + hb[c];
  return { logits, tokens: tokens.v };
}
