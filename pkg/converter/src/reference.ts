/**
 * Independent forward pass used to verify exported orientation:
 * y = activation(x @ K + b_k) @ V + b_v with K as (h, d) row-major.
 */

import { Activation } from "./extract.js";

function geluTanh(x: number): number {
    const c = Math.sqrt(2 / Math.PI);
    return 0.5 * x * (1 + Math.tanh(c * (x + 0.044715 * x * x * x)));
}

export function referenceForward(
    k: Float64Array,
    v: Float64Array,
    h: number,
    d: number,
    activation: Activation,
    x: Float64Array,
    bK?: Float64Array,
    bV?: Float64Array,
): Float64Array {
    if (x.length !== h) {
        throw new Error(`probe vector has length ${x.length}, expected ${h}`);
    }
    const pre = new Float64Array(d);
    for (let j = 0; j < d; j++) {
        let acc = bK ? bK[j] : 0;
        for (let i = 0; i < h; i++) {
            acc += x[i] * k[i * d + j];
        }
        pre[j] = activation === "relu" ? Math.max(0, acc) : geluTanh(acc);
    }
    const y = new Float64Array(h);
    for (let i = 0; i < h; i++) {
        let acc = bV ? bV[i] : 0;
        for (let j = 0; j < d; j++) {
            acc += pre[j] * v[j * h + i];
        }
        y[i] = acc;
    }
    return y;
}
