/**
 * CLI: extract one layer's FFN weights from a checkpoint.
 *
 *   node dist/src/main.js extract --model model.safetensors --layer 0 --out layer.emoe
 *
 * Exit codes: 0 success, 1 usage error, 2 extraction/validation error.
 */

import { extractFfn } from "./extract.js";

function parseArgs(argv: string[]): Map<string, string> {
    const out = new Map<string, string>();
    for (let i = 0; i < argv.length; i += 2) {
        const flag = argv[i];
        if (!flag.startsWith("--") || i + 1 >= argv.length) {
            throw new Error(`malformed arguments near ${flag}`);
        }
        out.set(flag.slice(2), argv[i + 1]);
    }
    return out;
}

export function run(argv: string[]): number {
    if (argv[0] !== "extract") {
        console.error("usage: extract --model <file.safetensors> --layer <i> --out <path>");
        return 1;
    }
    let flags: Map<string, string>;
    try {
        flags = parseArgs(argv.slice(1));
    } catch (err) {
        console.error(`usage error: ${(err as Error).message}`);
        return 1;
    }
    const model = flags.get("model");
    const layer = flags.get("layer");
    const out = flags.get("out");
    if (!model || layer === undefined || !out) {
        console.error("usage error: --model, --layer and --out are required");
        return 1;
    }
    try {
        const manifest = extractFfn(model, Number(layer), out);
        console.log(`wrote ${out} (K ${manifest.h}x${manifest.d}, V ${manifest.d}x${manifest.h}, `
            + `${manifest.family}, ${manifest.activation})`);
        console.log(`manifest: ${out}.manifest.txt`);
        return 0;
    } catch (err) {
        console.error(`extraction error: ${(err as Error).message}`);
        return 2;
    }
}

const invokedDirectly = process.argv[1] !== undefined
    && import.meta.url.endsWith(process.argv[1].split("/").pop() ?? "");
if (invokedDirectly) {
    process.exit(run(process.argv.slice(2)));
}
