/**
 * Weight container writer/reader.
 *
 * Layout: u64 little-endian header length, UTF-8 JSON header mapping tensor
 * names to {byte_length, byte_offset, dtype, shape} (keys sorted at both
 * levels), then raw little-endian row-major payloads in sorted-name order.
 * Sorted layout makes write -> read -> write byte-identical, and matches the
 * engine's own serializer byte for byte.
 */

export type Dtype = "f32" | "f64";

export interface Tensor {
  dtype: Dtype;
  shape: number[];
  /** row-major values; Float32Array for f32, Float64Array for f64 */
  data: Float32Array | Float64Array;
}

export function tensorF32(shape: number[], data: Float32Array): Tensor {
  checkCount(shape, data.length);
  return { dtype: "f32", shape, data };
}

export function tensorF64(shape: number[], data: Float64Array): Tensor {
  checkCount(shape, data.length);
  return { dtype: "f64", shape, data };
}

function checkCount(shape: number[], n: number): void {
  const count = shape.reduce((a, b) => a * b, 1);
  if (count !== n) {
    throw new Error(`shape [${shape}] does not match ${n} values`);
  }
}

export function serializeContainer(tensors: Map<string, Tensor>): Buffer {
  const names = [...tensors.keys()].sort();
  const header: Record<string, unknown> = {};
  let offset = 0;
  for (const name of names) {
    const t = tensors.get(name)!;
    const nbytes = t.data.length * t.data.BYTES_PER_ELEMENT;
    // insertion order below must stay alphabetical: the engine serializes
    // with sorted keys and cross-tool byte identity is part of the contract
    header[name] = {
      byte_length: nbytes,
      byte_offset: offset,
      dtype: t.dtype,
      shape: t.shape,
    };
    offset += nbytes;
  }
  const headerBlob = Buffer.from(JSON.stringify(header), "utf-8");
  const lenPrefix = Buffer.alloc(8);
  lenPrefix.writeBigUInt64LE(BigInt(headerBlob.length));
  const parts: Buffer[] = [lenPrefix, headerBlob];
  for (const name of names) {
    const t = tensors.get(name)!;
    // typed arrays are little-endian on every platform node supports
    parts.push(Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength));
  }
  return Buffer.concat(parts);
}

export function parseContainer(raw: Buffer): Map<string, Tensor> {
  if (raw.length < 8) throw new Error("truncated container");
  const hlen = Number(raw.readBigUInt64LE(0));
  if (8 + hlen > raw.length) throw new Error("header length exceeds file size");
  const header = JSON.parse(raw.subarray(8, 8 + hlen).toString("utf-8")) as Record<
    string,
    { dtype: Dtype; shape: number[]; byte_offset: number; byte_length: number }
  >;
  const payload = raw.subarray(8 + hlen);
  const out = new Map<string, Tensor>();
  for (const [name, meta] of Object.entries(header)) {
    const count = meta.shape.reduce((a, b) => a * b, 1);
    const start = meta.byte_offset;
    if (start + meta.byte_length > payload.length) {
      throw new Error(`${name}: payload out of range`);
    }
    const bytes = payload.subarray(start, start + meta.byte_length);
    if (meta.dtype === "f32") {
      if (meta.byte_length !== count * 4) throw new Error(`${name}: bad byte_length`);
      const data = new Float32Array(count);
      for (let i = 0; i < count; i++) data[i] = bytes.readFloatLE(i * 4);
      out.set(name, { dtype: "f32", shape: meta.shape, data });
    } else if (meta.dtype === "f64") {
      if (meta.byte_length !== count * 8) throw new Error(`${name}: bad byte_length`);
      const data = new Float64Array(count);
      for (let i = 0; i < count; i++) data[i] = bytes.readDoubleLE(i * 8);
      out.set(name, { dtype: "f64", shape: meta.shape, data });
    } else {
      throw new Error(`${name}: unknown dtype ${(meta as { dtype: string }).dtype}`);
    }
  }
  return out;
}

export interface ModelArch {
  image_size: number;
  patch_size: number;
  d_model: number;
  n_heads: number;
  n_blocks: number;
  d_ff: number;
  n_classes: number;
  layernorm_eps: number;
}

/** Canonical tensor name -> shape expected by the engine. */
export function expectedShapes(arch: ModelArch): Map<string, number[]> {
  const { d_model: d, d_ff: dff, n_classes: c } = arch;
  const grid = arch.image_size / arch.patch_size;
  const nTokens = 1 + grid * grid;
  const p3 = arch.patch_size * arch.patch_size * 3;
  const shapes = new Map<string, number[]>([
    ["patch_embed.w", [p3, d]],
    ["patch_embed.b", [d]],
    ["cls_token", [d]],
    ["pos_embed", [nTokens, d]],
    ["norm.g", [d]],
    ["norm.b", [d]],
    ["head.w", [d, c]],
    ["head.b", [c]],
  ]);
  for (let i = 0; i < arch.n_blocks; i++) {
    const pre = `block.${i}`;
    shapes.set(`${pre}.ln1.g`, [d]);
    shapes.set(`${pre}.ln1.b`, [d]);
    for (const nm of ["wq", "wk", "wv", "wo"]) shapes.set(`${pre}.attn.${nm}`, [d, d]);
    for (const nm of ["bq", "bk", "bv", "bo"]) shapes.set(`${pre}.attn.${nm}`, [d]);
    shapes.set(`${pre}.ln2.g`, [d]);
    shapes.set(`${pre}.ln2.b`, [d]);
    shapes.set(`${pre}.ffn.w1`, [d, dff]);
    shapes.set(`${pre}.ffn.b1`, [dff]);
    shapes.set(`${pre}.ffn.w2`, [dff, d]);
    shapes.set(`${pre}.ffn.b2`, [d]);
  }
  return shapes;
}

/** Throws listing every name/shape problem; used for the post-export self check. */
export function selfCheck(arch: ModelArch, tensors: Map<string, Tensor>): void {
  const shapes = expectedShapes(arch);
  const problems: string[] = [];
  for (const [name, shape] of shapes) {
    const t = tensors.get(name);
    if (!t) {
      problems.push(`missing tensor ${name}`);
    } else if (t.shape.length !== shape.length || t.shape.some((v, i) => v !== shape[i])) {
      problems.push(`${name}: shape [${t.shape}] != expected [${shape}]`);
    }
  }
  for (const name of tensors.keys()) {
    if (!shapes.has(name)) problems.push(`unexpected tensor ${name}`);
  }
  if (problems.length > 0) {
    throw new Error(`container self-check failed: ${problems.sort().join("; ")}`);
  }
}
