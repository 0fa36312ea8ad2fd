/* tslint:disable */
/* eslint-disable */

/**
 * Passive, reactive and predictive nodes tracking a signal whose channel
 * bias drifts at `rate` per second, with optional sensor noise.
 */
export function behavior_race(rate: number, noise: number, duration: number, seed: bigint): string;

/**
 * Additivity residual `q(u + u2) - q(u) - q(u2)` for `u` over
 * `[0, span]`, with the worst-case bound for the channel.
 */
export function channel_sweep(gain: number, bias: number, quantization: number, u2: number, span: number, points: number): string;

/**
 * The bundled two-strategy shock scenario, with learning on or off.
 */
export function learning_run(seed: bigint, learning: boolean): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly behavior_race: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly channel_sweep: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly learning_run: (a: bigint, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
