/**
 * Export tool CLI.
 *
 * Usage:
 *   node dist/cli.js fixture --recipe recipe.json --out DIR
 *   node dist/cli.js convert --input model.safetensors --arch arch.json \
 *        --style timm|hf --out DIR
 *
 * `fixture` generates a random model + fixture images + reference dumps from
 * a recipe. `convert` maps a public safetensors checkpoint onto the engine's
 * container; arch.json carries the ModelArch fields and optional
 * normalization constants.
 */

import { readFileSync, writeFileSync, mkdirSync } from "node:fs";
import { join } from "node:path";

import { ModelArch, serializeContainer } from "./container.js";
import { convertCheckpoint, SourceStyle } from "./convert.js";
import { RandomModelRecipe, runExport } from "./fixtures.js";
import { parseSafetensors } from "./safetensors.js";

interface Args {
  command?: string;
  recipe?: string;
  input?: string;
  arch?: string;
  style?: string;
  out?: string;
}

function parseArgs(argv: string[]): Args {
  const args: Args = { command: argv[0] };
  for (let i = 1; i < argv.length; i++) {
    switch (argv[i]) {
      case "--recipe":
        args.recipe = argv[++i];
        break;
      case "--input":
        args.input = argv[++i];
        break;
      case "--arch":
        args.arch = argv[++i];
        break;
      case "--style":
        args.style = argv[++i];
        break;
      case "--out":
        args.out = argv[++i];
        break;
      default:
        console.error(`unknown argument: ${argv[i]}`);
        process.exit(2);
    }
  }
  return args;
}

function cmdFixture(args: Args): number {
  if (!args.recipe || !args.out) {
    console.error("fixture requires --recipe and --out");
    return 2;
  }
  const recipe = JSON.parse(readFileSync(args.recipe, "utf-8")) as RandomModelRecipe;
  const result = runExport(recipe, args.out);
  console.log(`wrote ${result.containerPath}`);
  console.log(`wrote ${result.configPath}`);
  for (const p of result.imagePaths) console.log(`wrote ${p}`);
  console.log(`reference dumps: ${Object.keys(result.referenceDumps).length}`);
  return 0;
}

function cmdConvert(args: Args): number {
  if (!args.input || !args.arch || !args.out) {
    console.error("convert requires --input, --arch and --out");
    return 2;
  }
  const style = (args.style ?? "timm") as SourceStyle;
  if (style !== "timm" && style !== "hf") {
    console.error(`unknown style ${style}`);
    return 2;
  }
  const archDoc = JSON.parse(readFileSync(args.arch, "utf-8")) as {
    model?: ModelArch;
    normalize?: { mean: number[]; std: number[] };
  } & Partial<ModelArch>;
  const arch: ModelArch = (archDoc.model ?? archDoc) as ModelArch;
  const source = parseSafetensors(readFileSync(args.input));
  const tensors = convertCheckpoint(source, arch, style);
  mkdirSync(args.out, { recursive: true });
  writeFileSync(join(args.out, "model.bin"), serializeContainer(tensors));
  const config = {
    model: arch,
    normalize: archDoc.normalize ?? { mean: [0.5, 0.5, 0.5], std: [0.5, 0.5, 0.5] },
  };
  writeFileSync(join(args.out, "model.json"), JSON.stringify(config, null, 2) + "\n");
  console.log(`converted ${source.size} tensors -> ${join(args.out, "model.bin")}`);
  return 0;
}

function main(): number {
  const args = parseArgs(process.argv.slice(2));
  try {
    switch (args.command) {
      case "fixture":
        return cmdFixture(args);
      case "convert":
        return cmdConvert(args);
      default:
        console.error("usage: cli.js <fixture|convert> [options]");
        return 2;
    }
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

process.exit(main());
