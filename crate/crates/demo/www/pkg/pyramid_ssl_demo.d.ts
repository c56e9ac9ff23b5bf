/* tslint:disable */
/* eslint-disable */

/**
 * A synthetic radiograph, its global view and the corrupted local view.
 */
export function augment_preview(seed: number, size: number, strength: number): string;

/**
 * Encoder stage and decoder level dims for an input of the given size.
 */
export function pyramid_shapes(three_d: boolean, input: Uint32Array): string;

/**
 * Global pair, bounding box and local boxes in a `d0 x d1 x d2` volume.
 */
export function sample_crops(dims: Uint32Array, iou_min: number, num_local: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly augment_preview: (a: number, b: number, c: number) => [number, number, number, number];
    readonly pyramid_shapes: (a: number, b: number, c: number) => [number, number, number, number];
    readonly sample_crops: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
