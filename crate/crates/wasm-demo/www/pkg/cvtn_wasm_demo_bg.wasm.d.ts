/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const channel_ledger: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_epochs: (a: number, b: number) => number;
export const demo_forecast: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const demo_horizon: (a: number) => number;
export const demo_lookback: (a: number) => number;
export const demo_new: (a: number, b: number, c: bigint) => [number, number, number];
export const demo_train_epoch: (a: number, b: number) => [number, number, number, number];
export const demo_val_windows: (a: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
