/**
 * Binary tensor container consumed by the analysis toolkit.
 *
 * Layout (all integers little-endian):
 *   magic "EMOE" | u32 version (=1) | u32 entry count
 *   per entry: u16 name length, utf-8 name, u8 dtype (0=f32, 1=f64),
 *              u8 ndim (1 or 2), u32 dims..., row-major payload.
 */

import * as fs from "node:fs";

export type Dtype = "f32" | "f64";

export interface NamedTensor {
    name: string;
    dtype: Dtype;
    dims: number[];
    data: Float64Array; // values held as f64; dtype controls on-disk width
}

const MAGIC = Buffer.from("EMOE", "ascii");
const VERSION = 1;

function itemSize(dtype: Dtype): number {
    return dtype === "f32" ? 4 : 8;
}

export function encodeTensorFile(tensors: NamedTensor[]): Buffer {
    const seen = new Set<string>();
    let size = 12;
    for (const t of tensors) {
        if (seen.has(t.name)) {
            throw new Error(`duplicate tensor name ${t.name}`);
        }
        seen.add(t.name);
        const count = t.dims.reduce((a, b) => a * b, 1);
        if (t.dims.length < 1 || t.dims.length > 2) {
            throw new Error(`tensor ${t.name} must be 1-D or 2-D`);
        }
        if (count !== t.data.length) {
            throw new Error(`tensor ${t.name}: dims ${t.dims} do not match length ${t.data.length}`);
        }
        size += 2 + Buffer.byteLength(t.name, "utf-8") + 2 + 4 * t.dims.length
            + count * itemSize(t.dtype);
    }
    const out = Buffer.alloc(size);
    let off = 0;
    MAGIC.copy(out, off); off += 4;
    out.writeUInt32LE(VERSION, off); off += 4;
    out.writeUInt32LE(tensors.length, off); off += 4;
    for (const t of tensors) {
        const nameBytes = Buffer.from(t.name, "utf-8");
        out.writeUInt16LE(nameBytes.length, off); off += 2;
        nameBytes.copy(out, off); off += nameBytes.length;
        out.writeUInt8(t.dtype === "f32" ? 0 : 1, off); off += 1;
        out.writeUInt8(t.dims.length, off); off += 1;
        for (const dim of t.dims) {
            out.writeUInt32LE(dim, off); off += 4;
        }
        for (const v of t.data) {
            if (!Number.isFinite(v)) {
                throw new Error(`tensor ${t.name} contains a non-finite value`);
            }
            if (t.dtype === "f32") {
                out.writeFloatLE(Math.fround(v), off); off += 4;
            } else {
                out.writeDoubleLE(v, off); off += 8;
            }
        }
    }
    return out;
}

export function writeTensorFile(path: string, tensors: NamedTensor[]): void {
    fs.writeFileSync(path, encodeTensorFile(tensors));
}

export function readTensorFile(path: string): Map<string, NamedTensor> {
    const buf = fs.readFileSync(path);
    if (buf.length < 12 || !buf.subarray(0, 4).equals(MAGIC)) {
        throw new Error(`${path}: bad magic`);
    }
    const version = buf.readUInt32LE(4);
    if (version !== VERSION) {
        throw new Error(`${path}: unsupported version ${version}`);
    }
    const count = buf.readUInt32LE(8);
    let off = 12;
    const out = new Map<string, NamedTensor>();
    for (let i = 0; i < count; i++) {
        const nameLen = buf.readUInt16LE(off); off += 2;
        const name = buf.subarray(off, off + nameLen).toString("utf-8"); off += nameLen;
        const dtypeCode = buf.readUInt8(off); off += 1;
        const ndim = buf.readUInt8(off); off += 1;
        if (dtypeCode > 1 || ndim < 1 || ndim > 2) {
            throw new Error(`${path}: malformed entry ${name} at offset ${off}`);
        }
        const dims: number[] = [];
        for (let j = 0; j < ndim; j++) {
            dims.push(buf.readUInt32LE(off)); off += 4;
        }
        const dtype: Dtype = dtypeCode === 0 ? "f32" : "f64";
        const n = dims.reduce((a, b) => a * b, 1);
        const data = new Float64Array(n);
        for (let j = 0; j < n; j++) {
            data[j] = dtype === "f32" ? buf.readFloatLE(off) : buf.readDoubleLE(off);
            off += itemSize(dtype);
        }
        out.set(name, { name, dtype, dims, data });
    }
    if (off !== buf.length) {
        throw new Error(`${path}: trailing bytes at offset ${off}`);
    }
    return out;
}
