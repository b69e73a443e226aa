/**
 * Export-fidelity acceptance: the engine, fed an exported container through
 * its public CLI, must reproduce the exporter-recorded reference logits
 * within 1e-3 (float32 recording) and tokens within 1e-4 on every fixture
 * image; and the container must survive a cross-tool round trip byte for
 * byte.
 */

import { execFileSync } from "node:child_process";
import { createHash } from "node:crypto";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { basename, join } from "node:path";

import { describe, expect, it } from "vitest";

import { RandomModelRecipe, runExport } from "../src/fixtures.js";

function traceDump(outDir: string, containerPath: string, configPath: string, imagePath: string) {
  const dumpDir = join(outDir, `dump-${basename(imagePath)}`);
  execFileSync(
    "python3",
    [
      "-m",
      "vitexplain",
      "trace-dump",
      "--model",
      containerPath,
      "--config",
      configPath,
      "--image",
      imagePath,
      "--out",
      dumpDir,
    ],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  return JSON.parse(readFileSync(join(dumpDir, "trace.json"), "utf-8")) as {
    logits: number[];
    tokens: number[][];
  };
}

function checkFidelity(recipe: RandomModelRecipe, logitsTol: number, tokensTol: number) {
  const dir = mkdtempSync(join(tmpdir(), "fidelity-"));
  const result = runExport(recipe, dir);
  const config = JSON.parse(readFileSync(result.configPath, "utf-8"));
  for (const imagePath of result.imagePaths) {
    const hash = createHash("sha256").update(readFileSync(imagePath)).digest("hex");
    const dump = config.reference_dumps[hash];
    const engine = traceDump(dir, result.containerPath, result.configPath, imagePath);
    expect(engine.logits).toHaveLength(dump.logits.length);
    let worstLogit = 0;
    for (let c = 0; c < dump.logits.length; c++) {
      worstLogit = Math.max(worstLogit, Math.abs(engine.logits[c] - dump.logits[c]));
    }
    expect(worstLogit).toBeLessThan(logitsTol);
    if (dump.tokens) {
      let worstToken = 0;
      for (let i = 0; i < dump.tokens.length; i++) {
        for (let j = 0; j < dump.tokens[i].length; j++) {
          worstToken = Math.max(worstToken, Math.abs(engine.tokens[i][j] - dump.tokens[i][j]));
        }
      }
      expect(worstToken).toBeLessThan(tokensTol);
    }
  }
  return result;
}

describe("engine fidelity", () => {
  it("toy model: engine matches reference logits and tokens", () => {
    const recipe: RandomModelRecipe = {
      kind: "random",
      arch: {
        image_size: 8,
        patch_size: 4,
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        d_ff: 7,
        n_classes: 4,
        layernorm_eps: 1e-6,
      },
      seed: 404,
      scale: 0.4,
      normalize: { mean: [0.5, 0.5, 0.5], std: [0.25, 0.25, 0.25] },
      fixtures: [
        { name: "noise0", kind: "noise", seed: 5 },
        { name: "noise1", kind: "noise", seed: 6 },
        { name: "blob0", kind: "blob", seed: 7 },
      ],
      dump_tokens: true,
    };
    checkFidelity(recipe, 1e-3, 1e-4);
  }, 120_000);

  it("DeiT-Tiny-shaped model: engine matches reference logits", () => {
    const recipe: RandomModelRecipe = {
      kind: "random",
      arch: {
        image_size: 224,
        patch_size: 16,
        d_model: 192,
        n_heads: 3,
        n_blocks: 12,
        d_ff: 768,
        n_classes: 1000,
        layernorm_eps: 1e-6,
      },
      seed: 1,
      scale: 0.1,
      normalize: { mean: [0.5, 0.5, 0.5], std: [0.25, 0.25, 0.25] },
      fixtures: [{ name: "blob0", kind: "blob", seed: 9 }],
      dump_tokens: true,
    };
    checkFidelity(recipe, 1e-3, 1e-4);
  }, 300_000);

  it("container round-trips byte-identically through the engine", () => {
    const recipe: RandomModelRecipe = {
      kind: "random",
      arch: {
        image_size: 8,
        patch_size: 4,
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        d_ff: 7,
        n_classes: 4,
        layernorm_eps: 1e-6,
      },
      seed: 77,
      scale: 0.4,
      normalize: { mean: [0.5, 0.5, 0.5], std: [0.25, 0.25, 0.25] },
      fixtures: [{ name: "noise0", kind: "noise", seed: 1 }],
    };
    const dir = mkdtempSync(join(tmpdir(), "roundtrip-"));
    const result = runExport(recipe, dir);
    const rewritten = join(dir, "rewritten.bin");
    execFileSync(
      "python3",
      [
        "-c",
        "import sys; from vitexplain.container import read_container, write_container; " +
          "write_container(sys.argv[2], read_container(sys.argv[1]))",
        result.containerPath,
        rewritten,
      ],
      { stdio: ["ignore", "pipe", "pipe"] },
    );
    expect(readFileSync(rewritten).equals(readFileSync(result.containerPath))).toBe(true);
  }, 60_000);
});
