/**
 * Public checkpoint -> engine container conversion.
 *
 * Supported source namings:
 *   timm: cls_token, pos_embed, patch_embed.proj.*, blocks.{i}.attn.qkv.*
 *         (fused; split into separate query/key/value here), blocks.{i}.attn.proj.*,
 *         blocks.{i}.norm1/norm2, blocks.{i}.mlp.fc1/fc2, norm.*, head.*
 *   hf:   vit.embeddings.*, vit.encoder.layer.{i}.attention.attention.query/key/value,
 *         attention.output.dense, intermediate.dense, output.dense,
 *         layernorm_before/after, vit.layernorm, classifier
 *
 * torch Linear weights are (out, in); the engine right-multiplies, so they
 * are transposed. The conv patch embedding (d, 3, P, P) is flattened to
 * (P*P*3, d) in (pixel row, pixel col, channel) order.
 */

import { ModelArch, selfCheck, Tensor, tensorF32 } from "./container.js";
import { StTensor } from "./safetensors.js";

export type SourceStyle = "timm" | "hf";

class SourceReader {
  used = new Set<string>();

  constructor(private tensors: Map<string, StTensor>) {}

  take(name: string): StTensor {
    const t = this.tensors.get(name);
    if (!t) throw new Error(`missing source tensor ${name}`);
    this.used.add(name);
    return t;
  }

  unused(): string[] {
    return [...this.tensors.keys()].filter((n) => !this.used.has(n)).sort();
  }
}

function toF32(t: StTensor): Float32Array {
  return t.data instanceof Float32Array ? t.data : Float32Array.from(t.data);
}

function vector(t: StTensor, length: number, what: string): Tensor {
  const flat = toF32(t);
  if (flat.length !== length) throw new Error(`${what}: expected ${length} values, got ${flat.length}`);
  return tensorF32([length], flat);
}

/** (out, in) torch Linear weight -> (in, out) engine layout. */
function transposed(t: StTensor, rows: number, cols: number, what: string): Tensor {
  const flat = toF32(t);
  if (t.shape.length !== 2 || t.shape[0] !== cols || t.shape[1] !== rows) {
    throw new Error(`${what}: expected source shape [${cols}, ${rows}], got [${t.shape}]`);
  }
  const out = new Float32Array(rows * cols);
  for (let o = 0; o < cols; o++) {
    for (let i = 0; i < rows; i++) out[i * cols + o] = flat[o * rows + i];
  }
  return tensorF32([rows, cols], out);
}

function convPatchEmbed(t: StTensor, arch: ModelArch): Tensor {
  const d = arch.d_model;
  const p = arch.patch_size;
  const [od, ch, kh, kw] = t.shape;
  if (od !== d || ch !== 3 || kh !== p || kw !== p) {
    throw new Error(`patch embedding: expected [${d}, 3, ${p}, ${p}], got [${t.shape}]`);
  }
  const flat = toF32(t);
  const out = new Float32Array(p * p * 3 * d);
  for (let o = 0; o < d; o++) {
    for (let c = 0; c < 3; c++) {
      for (let py = 0; py < p; py++) {
        for (let px = 0; px < p; px++) {
          out[((py * p + px) * 3 + c) * d + o] = flat[((o * 3 + c) * p + py) * p + px];
        }
      }
    }
  }
  return tensorF32([p * p * 3, d], out);
}

function splitFusedQkv(weight: StTensor, bias: StTensor | null, d: number) {
  if (weight.shape[0] !== 3 * d || weight.shape[1] !== d) {
    throw new Error(`fused qkv: expected [${3 * d}, ${d}], got [${weight.shape}]`);
  }
  const flat = toF32(weight);
  const mats: Tensor[] = [];
  const vecs: Tensor[] = [];
  for (let part = 0; part < 3; part++) {
    const w = new Float32Array(d * d);
    for (let o = 0; o < d; o++) {
      for (let i = 0; i < d; i++) w[i * d + o] = flat[(part * d + o) * d + i];
    }
    mats.push(tensorF32([d, d], w));
    if (bias) {
      const b = toF32(bias).slice(part * d, (part + 1) * d);
      vecs.push(tensorF32([d], new Float32Array(b)));
    } else {
      vecs.push(tensorF32([d], new Float32Array(d)));
    }
  }
  return { mats, vecs };
}

export function convertCheckpoint(
  source: Map<string, StTensor>,
  arch: ModelArch,
  style: SourceStyle,
): Map<string, Tensor> {
  const src = new SourceReader(source);
  const d = arch.d_model;
  const out = new Map<string, Tensor>();

  const squeezeTo = (t: StTensor, shape: number[], what: string): Tensor => {
    const count = shape.reduce((a, b) => a * b, 1);
    const flat = toF32(t);
    if (flat.length !== count) throw new Error(`${what}: cannot reshape [${t.shape}] to [${shape}]`);
    return tensorF32(shape, flat);
  };

  const grid = arch.image_size / arch.patch_size;
  const nTokens = 1 + grid * grid;

  if (style === "timm") {
    out.set("cls_token", squeezeTo(src.take("cls_token"), [d], "cls_token"));
    out.set("pos_embed", squeezeTo(src.take("pos_embed"), [nTokens, d], "pos_embed"));
    out.set("patch_embed.w", convPatchEmbed(src.take("patch_embed.proj.weight"), arch));
    out.set("patch_embed.b", vector(src.take("patch_embed.proj.bias"), d, "patch bias"));
    for (let i = 0; i < arch.n_blocks; i++) {
      const pre = `blocks.${i}`;
      const dst = `block.${i}`;
      out.set(`${dst}.ln1.g`, vector(src.take(`${pre}.norm1.weight`), d, "ln1.g"));
      out.set(`${dst}.ln1.b`, vector(src.take(`${pre}.norm1.bias`), d, "ln1.b"));
      const { mats, vecs } = splitFusedQkv(
        src.take(`${pre}.attn.qkv.weight`),
        src.take(`${pre}.attn.qkv.bias`),
        d,
      );
      out.set(`${dst}.attn.wq`, mats[0]);
      out.set(`${dst}.attn.wk`, mats[1]);
      out.set(`${dst}.attn.wv`, mats[2]);
      out.set(`${dst}.attn.bq`, vecs[0]);
      out.set(`${dst}.attn.bk`, vecs[1]);
      out.set(`${dst}.attn.bv`, vecs[2]);
      out.set(`${dst}.attn.wo`, transposed(src.take(`${pre}.attn.proj.weight`), d, d, "attn.proj"));
      out.set(`${dst}.attn.bo`, vector(src.take(`${pre}.attn.proj.bias`), d, "attn.proj bias"));
      out.set(`${dst}.ln2.g`, vector(src.take(`${pre}.norm2.weight`), d, "ln2.g"));
      out.set(`${dst}.ln2.b`, vector(src.take(`${pre}.norm2.bias`), d, "ln2.b"));
      out.set(`${dst}.ffn.w1`, transposed(src.take(`${pre}.mlp.fc1.weight`), d, arch.d_ff, "fc1"));
      out.set(`${dst}.ffn.b1`, vector(src.take(`${pre}.mlp.fc1.bias`), arch.d_ff, "fc1 bias"));
      out.set(`${dst}.ffn.w2`, transposed(src.take(`${pre}.mlp.fc2.weight`), arch.d_ff, d, "fc2"));
      out.set(`${dst}.ffn.b2`, vector(src.take(`${pre}.mlp.fc2.bias`), d, "fc2 bias"));
    }
    out.set("norm.g", vector(src.take("norm.weight"), d, "norm.g"));
    out.set("norm.b", vector(src.take("norm.bias"), d, "norm.b"));
    out.set("head.w", transposed(src.take("head.weight"), d, arch.n_classes, "head"));
    out.set("head.b", vector(src.take("head.bias"), arch.n_classes, "head bias"));
  } else {
    out.set("cls_token", squeezeTo(src.take("vit.embeddings.cls_token"), [d], "cls_token"));
    out.set(
      "pos_embed",
      squeezeTo(src.take("vit.embeddings.position_embeddings"), [nTokens, d], "pos_embed"),
    );
    out.set(
      "patch_embed.w",
      convPatchEmbed(src.take("vit.embeddings.patch_embeddings.projection.weight"), arch),
    );
    out.set(
      "patch_embed.b",
      vector(src.take("vit.embeddings.patch_embeddings.projection.bias"), d, "patch bias"),
    );
    for (let i = 0; i < arch.n_blocks; i++) {
      const pre = `vit.encoder.layer.${i}`;
      const dst = `block.${i}`;
      out.set(`${dst}.ln1.g`, vector(src.take(`${pre}.layernorm_before.weight`), d, "ln1.g"));
      out.set(`${dst}.ln1.b`, vector(src.take(`${pre}.layernorm_before.bias`), d, "ln1.b"));
      for (const [nm, key] of [
        ["wq", "query"],
        ["wk", "key"],
        ["wv", "value"],
      ] as const) {
        out.set(
          `${dst}.attn.${nm}`,
          transposed(src.take(`${pre}.attention.attention.${key}.weight`), d, d, key),
        );
        out.set(
          `${dst}.attn.b${nm[1]}`,
          vector(src.take(`${pre}.attention.attention.${key}.bias`), d, `${key} bias`),
        );
      }
      out.set(
        `${dst}.attn.wo`,
        transposed(src.take(`${pre}.attention.output.dense.weight`), d, d, "attn out"),
      );
      out.set(
        `${dst}.attn.bo`,
        vector(src.take(`${pre}.attention.output.dense.bias`), d, "attn out bias"),
      );
      out.set(`${dst}.ln2.g`, vector(src.take(`${pre}.layernorm_after.weight`), d, "ln2.g"));
      out.set(`${dst}.ln2.b`, vector(src.take(`${pre}.layernorm_after.bias`), d, "ln2.b"));
      out.set(
        `${dst}.ffn.w1`,
        transposed(src.take(`${pre}.intermediate.dense.weight`), d, arch.d_ff, "fc1"),
      );
      out.set(`${dst}.ffn.b1`, vector(src.take(`${pre}.intermediate.dense.bias`), arch.d_ff, "fc1 bias"));
      out.set(`${dst}.ffn.w2`, transposed(src.take(`${pre}.output.dense.weight`), arch.d_ff, d, "fc2"));
      out.set(`${dst}.ffn.b2`, vector(src.take(`${pre}.output.dense.bias`), d, "fc2 bias"));
    }
    out.set("norm.g", vector(src.take("vit.layernorm.weight"), d, "norm.g"));
    out.set("norm.b", vector(src.take("vit.layernorm.bias"), d, "norm.b"));
    out.set("head.w", transposed(src.take("classifier.weight"), d, arch.n_classes, "head"));
    out.set("head.b", vector(src.take("classifier.bias"), arch.n_classes, "head bias"));
  }

  const leftover = src.unused();
  if (leftover.length > 0) {
    throw new Error(`unmapped source tensors: ${leftover.join(", ")}`);
  }
  selfCheck(arch, out);
  return out;
}
