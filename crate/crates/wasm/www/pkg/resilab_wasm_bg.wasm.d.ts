/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const behavior_race: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const channel_sweep: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const learning_run: (a: bigint, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
