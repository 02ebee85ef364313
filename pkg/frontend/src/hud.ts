/**
 * HUD model: rolling FPS from frame arrival timestamps plus the last
 * server stats record, shown verbatim (the client computes only FPS).
 */

import type { FrameStats } from "./protocol.js";

export class FpsTracker {
  private times: number[] = [];

  constructor(private windowSize = 30) {}

  record(timestampMs: number): void {
    this.times.push(timestampMs);
    if (this.times.length > this.windowSize) this.times.shift();
  }

  fps(): number {
    if (this.times.length < 2) return 0;
    const span = this.times[this.times.length - 1] - this.times[0];
    if (span <= 0) return 0;
    return ((this.times.length - 1) * 1000) / span;
  }

  reset(): void {
    this.times = [];
  }
}

export interface HudState {
  fps: number;
  stats: FrameStats | null;
  generation: number | null;
}

export function hudLine(hud: HudState): string {
  if (!hud.stats) return "waiting for frames";
  const s = hud.stats;
  return (
    `${hud.fps.toFixed(1)} fps | ${s.gaussian_count} gaussians | ` +
    `${s.render_ms.toFixed(1)} ms | levels ${s.levels_used.join(",")} | ` +
    `gamma ${s.gamma} | gen ${hud.generation}`
  );
}
