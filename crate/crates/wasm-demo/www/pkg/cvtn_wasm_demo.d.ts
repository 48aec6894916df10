/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    epochs(stage: number): number;
    /**
     * Forecast for validation window `index` with a fraction of its history
     * zeroed. Returns `history[L×2] ++ target[O×2] ++ z_cve[O×2] ++ y[O×2]`,
     * all row-major.
     */
    forecast(index: number, mask_fraction: number, mask_seed: bigint): Float64Array;
    horizon(): number;
    lookback(): number;
    /**
     * Builds the benchmark (`y₂` lags `y₁` by `lag` steps) and an untrained model.
     */
    constructor(lag: number, noise: number, seed: bigint);
    /**
     * One epoch of stage 1 (`stage = 1`) or stage 2. Returns
     * `[train_loss, val_loss]`.
     */
    train_epoch(stage: number): Float64Array;
    val_windows(): number;
}

/**
 * Channel count of every CTE layer, `T⁰` first, for `n_vars` variables,
 * growth `r` and `layers` layers.
 */
export function channel_ledger(n_vars: number, growth: number, layers: number): Uint32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly channel_ledger: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_epochs: (a: number, b: number) => number;
    readonly demo_forecast: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly demo_horizon: (a: number) => number;
    readonly demo_lookback: (a: number) => number;
    readonly demo_new: (a: number, b: number, c: bigint) => [number, number, number];
    readonly demo_train_epoch: (a: number, b: number) => [number, number, number, number];
    readonly demo_val_windows: (a: number) => [number, number, number];
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
