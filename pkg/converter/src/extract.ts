/**
 * Locate the two FFN weight matrices of one transformer layer inside a
 * safetensors checkpoint and export them in the analysis toolkit's
 * tensor-file format, oriented so that K is (h, d) with keys as columns
 * and V is (d, h) with values as rows. A plain-text manifest recording
 * the mapping, applied transposes, and the source checkpoint hash is
 * written next to the output file.
 *
 * Supported layouts: BERT-style encoders (intermediate/output Linear
 * weights, stored [out, in], so both matrices are transposed) and
 * GPT-2-style Conv1D weights (stored [in, out], taken as-is). Gated
 * MLPs with two input projections are rejected.
 */

import * as crypto from "node:crypto";
import * as fs from "node:fs";
import * as path from "node:path";

import { Checkpoint, readSafetensors, readTensor } from "./safetensors.js";
import { NamedTensor, writeTensorFile } from "./tensorfile.js";

export type Activation = "relu" | "gelu_tanh";

export interface ExtractionManifest {
    model: string;
    layer: number;
    family: "bert" | "gpt2";
    kSource: string;
    vSource: string;
    bKSource: string | null;
    bVSource: string | null;
    kTransposed: boolean;
    vTransposed: boolean;
    h: number;
    d: number;
    activation: Activation;
    sourceDtype: string;
    checkpointSha256: string;
}

const ACTIVATION_CODES: Record<Activation, number> = { relu: 0, gelu_tanh: 1 };

function findWithSuffix(ckpt: Checkpoint, suffix: string): string | null {
    const matches = [...ckpt.tensors.keys()].filter((k) => k.endsWith(suffix)).sort();
    if (matches.length > 1) {
        throw new Error(`${ckpt.path}: tensor name ${suffix} is ambiguous (${matches.join(", ")})`);
    }
    return matches.length === 1 ? matches[0] : null;
}

function transpose(data: Float64Array, rows: number, cols: number): Float64Array {
    const out = new Float64Array(data.length);
    for (let r = 0; r < rows; r++) {
        for (let c = 0; c < cols; c++) {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    return out;
}

interface HfConfig {
    hidden_size?: number;
    intermediate_size?: number;
    hidden_act?: string;
    n_embd?: number;
    n_inner?: number | null;
    activation_function?: string;
}

function readConfig(modelPath: string): HfConfig | null {
    const configPath = path.join(path.dirname(modelPath), "config.json");
    if (!fs.existsSync(configPath)) {
        return null;
    }
    return JSON.parse(fs.readFileSync(configPath, "utf-8")) as HfConfig;
}

function activationFromConfig(config: HfConfig | null): Activation {
    const name = config?.hidden_act ?? config?.activation_function ?? "gelu";
    if (name === "relu") {
        return "relu";
    }
    if (["gelu", "gelu_new", "gelu_pytorch_tanh", "gelu_fast"].includes(name)) {
        return "gelu_tanh";
    }
    throw new Error(`unsupported activation ${name}; only relu and gelu variants`);
}

export function extractFfn(modelPath: string, layer: number, outPath: string): ExtractionManifest {
    if (layer < 0 || !Number.isInteger(layer)) {
        throw new Error(`layer index must be a non-negative integer, got ${layer}`);
    }
    const ckpt = readSafetensors(modelPath);

    for (const gated of [`.${layer}.mlp.gate_proj.weight`, `.${layer}.mlp.up_proj.weight`]) {
        const hit = findWithSuffix(ckpt, gated);
        if (hit !== null) {
            throw new Error(
                `${modelPath}: gated MLP tensor ${hit} found; only plain two-matrix FFNs are supported`,
            );
        }
    }

    const bertK = findWithSuffix(ckpt, `.${layer}.intermediate.dense.weight`);
    const gptK = findWithSuffix(ckpt, `.${layer}.mlp.c_fc.weight`);

    let family: "bert" | "gpt2";
    let kName: string;
    let vName: string;
    let transposed: boolean;
    if (bertK !== null) {
        family = "bert";
        kName = bertK;
        const v = findWithSuffix(ckpt, `.${layer}.output.dense.weight`);
        if (v === null) {
            throw new Error(`${modelPath}: found ${bertK} but no matching output.dense.weight`);
        }
        vName = v;
        transposed = true; // Linear stores [out, in]
    } else if (gptK !== null) {
        family = "gpt2";
        kName = gptK;
        const v = findWithSuffix(ckpt, `.${layer}.mlp.c_proj.weight`);
        if (v === null) {
            throw new Error(`${modelPath}: found ${gptK} but no matching mlp.c_proj.weight`);
        }
        vName = v;
        transposed = false; // Conv1D stores [in, out]
    } else {
        throw new Error(
            `${modelPath}: no FFN weight for layer ${layer} `
            + `(looked for *.${layer}.intermediate.dense.weight and *.${layer}.mlp.c_fc.weight)`,
        );
    }

    const kRaw = readTensor(ckpt, kName);
    const vRaw = readTensor(ckpt, vName);
    if (kRaw.shape.length !== 2 || vRaw.shape.length !== 2) {
        throw new Error(`${modelPath}: ${kName} and ${vName} must be matrices`);
    }

    // orient K to (h, d) and V to (d, h)
    let k: Float64Array;
    let v: Float64Array;
    let h: number;
    let d: number;
    if (transposed) {
        [d, h] = kRaw.shape;
        k = transpose(kRaw.data, d, h);
        if (vRaw.shape[0] !== h || vRaw.shape[1] !== d) {
            throw new Error(
                `${modelPath}: ${vName} has shape [${vRaw.shape}], expected [${h}, ${d}]`,
            );
        }
        v = transpose(vRaw.data, h, d);
    } else {
        [h, d] = kRaw.shape;
        k = kRaw.data;
        if (vRaw.shape[0] !== d || vRaw.shape[1] !== h) {
            throw new Error(
                `${modelPath}: ${vName} has shape [${vRaw.shape}], expected [${d}, ${h}]`,
            );
        }
        v = vRaw.data;
    }

    const bKName = findWithSuffix(
        ckpt, family === "bert" ? `.${layer}.intermediate.dense.bias` : `.${layer}.mlp.c_fc.bias`,
    );
    const bVName = findWithSuffix(
        ckpt, family === "bert" ? `.${layer}.output.dense.bias` : `.${layer}.mlp.c_proj.bias`,
    );

    const config = readConfig(modelPath);
    if (config !== null) {
        const cfgH = config.hidden_size ?? config.n_embd;
        if (cfgH !== undefined && cfgH !== h) {
            throw new Error(`${modelPath}: config says hidden size ${cfgH} but tensors give h=${h}`);
        }
        const cfgD = config.intermediate_size ?? config.n_inner ?? undefined;
        if (cfgD !== undefined && cfgD !== null && cfgD !== d) {
            throw new Error(`${modelPath}: config says intermediate size ${cfgD} but tensors give d=${d}`);
        }
    }
    const activation = activationFromConfig(config);

    const tensors: NamedTensor[] = [
        { name: "K", dtype: "f32", dims: [h, d], data: k },
        { name: "V", dtype: "f32", dims: [d, h], data: v },
        {
            name: "meta", dtype: "f64", dims: [3],
            data: Float64Array.from([h, d, ACTIVATION_CODES[activation]]),
        },
    ];
    if (bKName !== null) {
        const bias = readTensor(ckpt, bKName);
        if (bias.data.length !== d) {
            throw new Error(`${modelPath}: ${bKName} has length ${bias.data.length}, expected ${d}`);
        }
        tensors.push({ name: "b_k", dtype: "f32", dims: [d], data: bias.data });
    }
    if (bVName !== null) {
        const bias = readTensor(ckpt, bVName);
        if (bias.data.length !== h) {
            throw new Error(`${modelPath}: ${bVName} has length ${bias.data.length}, expected ${h}`);
        }
        tensors.push({ name: "b_v", dtype: "f32", dims: [h], data: bias.data });
    }
    writeTensorFile(outPath, tensors);

    const manifest: ExtractionManifest = {
        model: modelPath,
        layer,
        family,
        kSource: kName,
        vSource: vName,
        bKSource: bKName,
        bVSource: bVName,
        kTransposed: transposed,
        vTransposed: transposed,
        h,
        d,
        activation,
        sourceDtype: ckpt.tensors.get(kName)!.dtype,
        checkpointSha256: crypto.createHash("sha256").update(fs.readFileSync(modelPath)).digest("hex"),
    };
    fs.writeFileSync(outPath + ".manifest.txt", formatManifest(manifest));
    return manifest;
}

export function formatManifest(m: ExtractionManifest): string {
    const lines = [
        `model: ${m.model}`,
        `layer: ${m.layer}`,
        `family: ${m.family}`,
        `k_source: ${m.kSource}`,
        `v_source: ${m.vSource}`,
        `b_k_source: ${m.bKSource ?? "none"}`,
        `b_v_source: ${m.bVSource ?? "none"}`,
        `k_transposed: ${m.kTransposed}`,
        `v_transposed: ${m.vTransposed}`,
        `h: ${m.h}`,
        `d: ${m.d}`,
        `activation: ${m.activation}`,
        `source_dtype: ${m.sourceDtype}`,
        `checkpoint_sha256: ${m.checkpointSha256}`,
    ];
    return lines.join("\n") + "\n";
}
