/** Deterministic checkpoint fixtures written in the safetensors layout. */

import * as fs from "node:fs";

export interface FixtureTensor {
    name: string;
    dtype: "F32" | "F64" | "F16";
    shape: number[];
    values: number[];
}

/** mulberry32: tiny seeded PRNG so fixtures are reproducible. */
export function prng(seed: number): () => number {
    let a = seed >>> 0;
    return () => {
        a = (a + 0x6d2b79f5) >>> 0;
        let t = a;
        t = Math.imul(t ^ (t >>> 15), t | 1);
        t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
        return (((t ^ (t >>> 14)) >>> 0) / 4294967296) * 2 - 1;
    };
}

function encodeF16(value: number): number {
    // round-to-nearest half precision, enough for test data in [-1, 1]
    const f32 = new DataView(new ArrayBuffer(4));
    f32.setFloat32(0, value, false);
    const bits = f32.getUint32(0, false);
    const sign = (bits >>> 16) & 0x8000;
    let exp = (bits >>> 23) & 0xff;
    let frac = bits & 0x7fffff;
    if (exp === 0xff) {
        return sign | 0x7c00 | (frac ? 1 : 0);
    }
    const newExp = exp - 127 + 15;
    if (newExp >= 31) {
        return sign | 0x7c00;
    }
    if (newExp <= 0) {
        return sign; // flush tiny values to zero
    }
    return sign | (newExp << 10) | (frac >>> 13);
}

export function writeSafetensors(path: string, tensors: FixtureTensor[]): void {
    const header: Record<string, unknown> = {};
    const chunks: Buffer[] = [];
    let offset = 0;
    for (const t of tensors) {
        const n = t.shape.reduce((a, b) => a * b, 1);
        if (n !== t.values.length) {
            throw new Error(`fixture ${t.name}: shape/values mismatch`);
        }
        let chunk: Buffer;
        if (t.dtype === "F32") {
            chunk = Buffer.alloc(4 * n);
            t.values.forEach((v, i) => chunk.writeFloatLE(Math.fround(v), 4 * i));
        } else if (t.dtype === "F64") {
            chunk = Buffer.alloc(8 * n);
            t.values.forEach((v, i) => chunk.writeDoubleLE(v, 8 * i));
        } else {
            chunk = Buffer.alloc(2 * n);
            t.values.forEach((v, i) => chunk.writeUInt16LE(encodeF16(v), 2 * i));
        }
        header[t.name] = {
            dtype: t.dtype,
            shape: t.shape,
            data_offsets: [offset, offset + chunk.length],
        };
        offset += chunk.length;
        chunks.push(chunk);
    }
    const headerJson = Buffer.from(JSON.stringify(header), "utf-8");
    const lenPrefix = Buffer.alloc(8);
    lenPrefix.writeBigUInt64LE(BigInt(headerJson.length));
    fs.writeFileSync(path, Buffer.concat([lenPrefix, headerJson, ...chunks]));
}

export function randomValues(rand: () => number, n: number): number[] {
    return Array.from({ length: n }, () => rand());
}
