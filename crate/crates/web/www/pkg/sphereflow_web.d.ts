/* tslint:disable */
/* eslint-disable */

export function clusteringSeries(n: number, heads: number, lambda: number, beta: number, gamma0: number, t_end: number, kind: string): Float64Array;

export function criticalBeta(alpha: number, heads: number, n: number): number;

export function marginSeries(heads: number, n: number, alpha: number, beta_lo: number, beta_hi: number, points: number): Float64Array;

export function rateSeries(beta: number, n: number, lambda_max: number, points: number): Float64Array;

export function strengthMarkers(beta: number, n: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly clusteringSeries: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly criticalBeta: (a: number, b: number, c: number) => number;
    readonly marginSeries: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly rateSeries: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly strengthMarkers: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
