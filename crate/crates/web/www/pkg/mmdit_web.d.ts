/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Row-major binary mask.
     */
    blend_mask(theta: number, sigma: number, source_only: boolean): Float64Array;
    constructor(seed: number);
    prepare_mask(source: string, target: string): number;
    /**
     * Row-major heatmap values in `[0, 1]`.
     */
    token_heatmap(prompt: string, word: string, block: number, t: number): Float64Array;
    words(prompt: string): string[];
    readonly depth: number;
    readonly height: number;
    readonly width: number;
}

/**
 * States of a controlled inversion of a ring of points, flattened as
 * `[step][point][x, y]`.
 */
export function inversion_paths(points: number, gamma: number, steps: number, seed: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_blend_mask: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_depth: (a: number) => number;
    readonly demo_height: (a: number) => number;
    readonly demo_new: (a: number) => [number, number, number];
    readonly demo_prepare_mask: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly demo_token_heatmap: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly demo_width: (a: number) => number;
    readonly demo_words: (a: number, b: number, c: number) => [number, number];
    readonly inversion_paths: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_drop_slice: (a: number, b: number) => void;
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
