/**
 * Minimal safetensors reader: 8-byte little-endian header length, JSON
 * header mapping tensor name to {dtype, shape, data_offsets}, then the
 * raw byte buffer. Offsets are relative to the start of the buffer.
 */

import * as fs from "node:fs";

export interface TensorInfo {
    dtype: string;
    shape: number[];
    data_offsets: [number, number];
}

export interface Checkpoint {
    path: string;
    tensors: Map<string, TensorInfo>;
    buffer: Buffer;
    metadata: Record<string, string>;
}

export function readSafetensors(path: string): Checkpoint {
    const raw = fs.readFileSync(path);
    if (raw.length < 8) {
        throw new Error(`${path}: too short for a safetensors file`);
    }
    const headerLen = Number(raw.readBigUInt64LE(0));
    if (8 + headerLen > raw.length) {
        throw new Error(`${path}: header length ${headerLen} exceeds file size`);
    }
    let header: Record<string, unknown>;
    try {
        header = JSON.parse(raw.subarray(8, 8 + headerLen).toString("utf-8"));
    } catch (err) {
        throw new Error(`${path}: invalid JSON header: ${err}`);
    }
    const tensors = new Map<string, TensorInfo>();
    let metadata: Record<string, string> = {};
    for (const [name, value] of Object.entries(header)) {
        if (name === "__metadata__") {
            metadata = value as Record<string, string>;
            continue;
        }
        tensors.set(name, value as TensorInfo);
    }
    return { path, tensors, buffer: raw.subarray(8 + headerLen), metadata };
}

function decodeF16(bits: number): number {
    const sign = (bits & 0x8000) ? -1 : 1;
    const exp = (bits >> 10) & 0x1f;
    const frac = bits & 0x3ff;
    if (exp === 0) {
        return sign * frac * 2 ** -24;
    }
    if (exp === 31) {
        return frac ? NaN : sign * Infinity;
    }
    return sign * (1 + frac / 1024) * 2 ** (exp - 15);
}

function decodeBf16(bits: number): number {
    const buf = new DataView(new ArrayBuffer(4));
    buf.setUint32(0, bits << 16, false);
    return buf.getFloat32(0, false);
}

/** Decode one tensor to float64 regardless of its stored precision. */
export function readTensor(ckpt: Checkpoint, name: string): { shape: number[]; data: Float64Array } {
    const info = ckpt.tensors.get(name);
    if (info === undefined) {
        throw new Error(`${ckpt.path}: missing tensor ${name}`);
    }
    const [start, end] = info.data_offsets;
    const bytes = ckpt.buffer.subarray(start, end);
    const n = info.shape.reduce((a, b) => a * b, 1);
    const data = new Float64Array(n);
    switch (info.dtype) {
        case "F32":
            for (let i = 0; i < n; i++) data[i] = bytes.readFloatLE(4 * i);
            break;
        case "F64":
            for (let i = 0; i < n; i++) data[i] = bytes.readDoubleLE(8 * i);
            break;
        case "F16":
            for (let i = 0; i < n; i++) data[i] = decodeF16(bytes.readUInt16LE(2 * i));
            break;
        case "BF16":
            for (let i = 0; i < n; i++) data[i] = decodeBf16(bytes.readUInt16LE(2 * i));
            break;
        default:
            throw new Error(`${ckpt.path}: tensor ${name} has unsupported dtype ${info.dtype}`);
    }
    if ((info.dtype === "F32" && bytes.length !== 4 * n)
        || (info.dtype === "F64" && bytes.length !== 8 * n)
        || ((info.dtype === "F16" || info.dtype === "BF16") && bytes.length !== 2 * n)) {
        throw new Error(`${ckpt.path}: tensor ${name} payload does not match its shape`);
    }
    return { shape: info.shape, data };
}
