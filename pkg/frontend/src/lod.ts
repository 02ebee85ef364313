/**
 * Level-range / screensize-threshold controls.
 *
 * Clamping happens client-side so the UI can never send a set_lod the
 * server would reject; the invariant l_start <= l_end is preserved by
 * dragging the other endpoint along.
 */

export interface LodState {
  lStart: number;
  lEnd: number;
  gamma: number;
  lMax: number;
}

export const GAMMA_MIN = 0.1;
export const GAMMA_MAX = 64;

export function createLod(lMax: number, gamma: number): LodState {
  return { lStart: 1, lEnd: lMax, gamma: clampGamma(gamma), lMax };
}

function clampLevel(v: number, lMax: number): number {
  return Math.min(Math.max(Math.round(v), 1), lMax);
}

export function clampGamma(v: number): number {
  if (!Number.isFinite(v)) return GAMMA_MIN;
  return Math.min(Math.max(v, GAMMA_MIN), GAMMA_MAX);
}

export function setLStart(state: LodState, value: number): LodState {
  const lStart = clampLevel(value, state.lMax);
  return { ...state, lStart, lEnd: Math.max(state.lEnd, lStart) };
}

export function setLEnd(state: LodState, value: number): LodState {
  const lEnd = clampLevel(value, state.lMax);
  return { ...state, lEnd, lStart: Math.min(state.lStart, lEnd) };
}

export function setGamma(state: LodState, value: number): LodState {
  return { ...state, gamma: clampGamma(value) };
}

/** Trailing-edge debounce; returns the wrapped function plus a canceller. */
export function debounce<Args extends unknown[]>(
  fn: (...args: Args) => void,
  delayMs = 150,
  timers: { set: typeof setTimeout; clear: typeof clearTimeout } = {
    set: setTimeout,
    clear: clearTimeout,
  },
): { call: (...args: Args) => void; cancel: () => void } {
  let handle: ReturnType<typeof setTimeout> | undefined;
  return {
    call: (...args: Args) => {
      if (handle !== undefined) timers.clear(handle);
      handle = timers.set(() => {
        handle = undefined;
        fn(...args);
      }, delayMs);
    },
    cancel: () => {
      if (handle !== undefined) timers.clear(handle);
      handle = undefined;
    },
  };
}
