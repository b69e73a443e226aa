/**
 * Minimal safetensors reader: u64-LE header length, JSON header mapping
 * tensor names to {dtype, shape, data_offsets}, then the payload. Only F32
 * and F64 tensors are supported; that covers public ViT/DeiT checkpoints.
 */

export interface StTensor {
  dtype: "F32" | "F64";
  shape: number[];
  data: Float32Array | Float64Array;
}

export function parseSafetensors(raw: Buffer): Map<string, StTensor> {
  if (raw.length < 8) throw new Error("truncated safetensors file");
  const hlen = Number(raw.readBigUInt64LE(0));
  const header = JSON.parse(raw.subarray(8, 8 + hlen).toString("utf-8")) as Record<
    string,
    { dtype: string; shape: number[]; data_offsets: [number, number] }
  >;
  const payload = raw.subarray(8 + hlen);
  const out = new Map<string, StTensor>();
  for (const [name, meta] of Object.entries(header)) {
    if (name === "__metadata__") continue;
    const [start, end] = meta.data_offsets;
    const count = meta.shape.reduce((a, b) => a * b, 1);
    const bytes = payload.subarray(start, end);
    if (meta.dtype === "F32") {
      if (end - start !== count * 4) throw new Error(`${name}: bad data_offsets`);
      const data = new Float32Array(count);
      for (let i = 0; i < count; i++) data[i] = bytes.readFloatLE(i * 4);
      out.set(name, { dtype: "F32", shape: meta.shape, data });
    } else if (meta.dtype === "F64") {
      if (end - start !== count * 8) throw new Error(`${name}: bad data_offsets`);
      const data = new Float64Array(count);
      for (let i = 0; i < count; i++) data[i] = bytes.readDoubleLE(i * 8);
      out.set(name, { dtype: "F64", shape: meta.shape, data });
    } else {
      throw new Error(`${name}: unsupported safetensors dtype ${meta.dtype}`);
    }
  }
  return out;
}

export function serializeSafetensors(tensors: Map<string, StTensor>): Buffer {
  const header: Record<string, unknown> = {};
  const parts: Buffer[] = [];
  let offset = 0;
  for (const [name, t] of tensors) {
    const buf = Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength);
    header[name] = {
      dtype: t.dtype,
      shape: t.shape,
      data_offsets: [offset, offset + buf.length],
    };
    parts.push(buf);
    offset += buf.length;
  }
  const blob = Buffer.from(JSON.stringify(header), "utf-8");
  const prefix = Buffer.alloc(8);
  prefix.writeBigUInt64LE(BigInt(blob.length));
  return Buffer.concat([prefix, blob, ...parts]);
}
