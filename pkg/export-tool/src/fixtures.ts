/**
 * Random fixture models and reference dumps.
 *
 * A recipe (JSON) names the architecture, the weight seed/scale, the
 * normalization constants and the fixture images. Export writes model.bin,
 * model.json (with reference dumps keyed by the sha256 of each image file)
 * and the fixture PPMs. The reference forward runs on the quantized bytes
 * actually stored in the PPM, so the engine sees bit-identical input.
 */

import { createHash } from "node:crypto";
import { mkdirSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { expectedShapes, ModelArch, selfCheck, serializeContainer, Tensor, tensorF32 } from "./container.js";
import { Rng } from "./rng.js";
import { forward, weightsView } from "./vit.js";

export interface FixtureImageSpec {
  name: string;
  kind: "noise" | "blob";
  seed: number;
}

export interface RandomModelRecipe {
  kind: "random";
  arch: ModelArch;
  seed: number;
  scale: number;
  normalize: { mean: number[]; std: number[] };
  fixtures: FixtureImageSpec[];
  dump_tokens?: boolean;
}

export function generateWeights(arch: ModelArch, seed: number, scale: number): Map<string, Tensor> {
  const rng = new Rng(seed);
  const out = new Map<string, Tensor>();
  for (const [name, shape] of expectedShapes(arch)) {
    const count = shape.reduce((a, b) => a * b, 1);
    const data = new Float32Array(count);
    if (name.endsWith(".g")) {
      for (let i = 0; i < count; i++) data[i] = Math.fround(1 + 0.1 * rng.gaussian());
    } else if (/\.(b|b1|b2|bq|bk|bv|bo)$/.test(name)) {
      for (let i = 0; i < count; i++) data[i] = Math.fround(0.1 * rng.gaussian());
    } else {
      for (let i = 0; i < count; i++) data[i] = Math.fround(scale * rng.gaussian());
    }
    out.set(name, tensorF32(shape, data));
  }
  return out;
}

/** 8-bit RGB pixels, row-major [H, W, 3]. */
export function generateImage(spec: FixtureImageSpec, size: number): Uint8Array {
  const rng = new Rng(spec.seed);
  const bytes = new Uint8Array(size * size * 3);
  if (spec.kind === "noise") {
    for (let i = 0; i < bytes.length; i++) bytes[i] = rng.int(256);
    return bytes;
  }
  bytes.fill(128); // dataset-mean background
  const minSide = Math.max(1, Math.floor((size * 2) / 7));
  const maxSide = Math.max(minSide, Math.floor(size / 2));
  const side = minSide + rng.int(maxSide - minSide + 1);
  const y0 = rng.int(size - side + 1);
  const x0 = rng.int(size - side + 1);
  for (let y = y0; y < y0 + side; y++) {
    for (let x = x0; x < x0 + side; x++) {
      for (let c = 0; c < 3; c++) bytes[(y * size + x) * 3 + c] = rng.int(256);
    }
  }
  return bytes;
}

export function encodePpm(size: number, bytes: Uint8Array): Buffer {
  return Buffer.concat([Buffer.from(`P6\n${size} ${size}\n255\n`, "ascii"), Buffer.from(bytes)]);
}

function stableStringify(value: unknown, indent: number): string {
  const sortValue = (v: unknown): unknown => {
    if (Array.isArray(v)) return v.map(sortValue);
    if (v !== null && typeof v === "object") {
      const entries = Object.entries(v as Record<string, unknown>).sort(([a], [b]) =>
        a < b ? -1 : a > b ? 1 : 0,
      );
      return Object.fromEntries(entries.map(([k, val]) => [k, sortValue(val)]));
    }
    return v;
  };
  return JSON.stringify(sortValue(value), null, indent);
}

export interface ExportResult {
  containerPath: string;
  configPath: string;
  imagePaths: string[];
  referenceDumps: Record<string, { logits: number[]; tokens?: number[][] }>;
}

export function runExport(recipe: RandomModelRecipe, outDir: string): ExportResult {
  if (recipe.kind !== "random") throw new Error(`unsupported recipe kind ${recipe.kind}`);
  const { arch } = recipe;
  mkdirSync(outDir, { recursive: true });
  const tensors = generateWeights(arch, recipe.seed, recipe.scale);
  selfCheck(arch, tensors);

  const containerPath = join(outDir, "model.bin");
  writeFileSync(containerPath, serializeContainer(tensors));

  const w = weightsView(tensors);
  const referenceDumps: Record<string, { logits: number[]; tokens?: number[][] }> = {};
  const imagePaths: string[] = [];
  for (const spec of recipe.fixtures) {
    const bytes = generateImage(spec, arch.image_size);
    const ppm = encodePpm(arch.image_size, bytes);
    const imagePath = join(outDir, `${spec.name}.ppm`);
    writeFileSync(imagePath, ppm);
    imagePaths.push(imagePath);

    const rgb01 = new Float64Array(bytes.length);
    for (let i = 0; i < bytes.length; i++) rgb01[i] = bytes[i] / 255;
    const out = forward(arch, w, rgb01, recipe.normalize.mean, recipe.normalize.std);
    const dump: { logits: number[]; tokens?: number[][] } = {
      logits: [...out.logits].map((v) => Math.fround(v)),
    };
    if (recipe.dump_tokens) {
      const d = arch.d_model;
      const n = out.tokens.length / d;
      const rows: number[][] = [];
      for (let i = 0; i < n; i++) {
        const row: number[] = [];
        for (let j = 0; j < d; j++) row.push(Math.fround(out.tokens[i * d + j]));
        rows.push(row);
      }
      dump.tokens = rows;
    }
    const hash = createHash("sha256").update(ppm).digest("hex");
    referenceDumps[hash] = dump;
  }

  const configDoc = {
    model: {
      image_size: arch.image_size,
      patch_size: arch.patch_size,
      d_model: arch.d_model,
      n_heads: arch.n_heads,
      n_blocks: arch.n_blocks,
      d_ff: arch.d_ff,
      n_classes: arch.n_classes,
      layernorm_eps: arch.layernorm_eps,
    },
    normalize: recipe.normalize,
    reference_dumps: referenceDumps,
  };
  const configPath = join(outDir, "model.json");
  writeFileSync(configPath, stableStringify(configDoc, 2) + "\n");
  return { containerPath, configPath, imagePaths, referenceDumps };
}
