/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_blend_mask: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_depth: (a: number) => number;
export const demo_height: (a: number) => number;
export const demo_new: (a: number) => [number, number, number];
export const demo_prepare_mask: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const demo_token_heatmap: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const demo_width: (a: number) => number;
export const demo_words: (a: number, b: number, c: number) => [number, number];
export const inversion_paths: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_start: () => void;
