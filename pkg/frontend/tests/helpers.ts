import type { SocketLike } from "../src/app.js";
import type { FrameStats } from "../src/protocol.js";
import { encodeFrame } from "../src/protocol.js";

/** Scripted socket: records client messages, lets tests inject replies. */
export class MockSocket implements SocketLike {
  sent: string[] = [];
  closed = false;
  onopen: (() => void) | null = null;
  onmessage: ((event: { data: string | ArrayBuffer | Uint8Array }) => void) | null = null;
  onclose: (() => void) | null = null;

  send(data: string): void {
    if (this.closed) throw new Error("send on closed socket");
    this.sent.push(data);
  }

  close(): void {
    this.closed = true;
  }

  open(): void {
    this.onopen?.();
  }

  reply(obj: unknown): void {
    this.onmessage?.({ data: JSON.stringify(obj) });
  }

  replyFrame(generation: number, stats: Partial<FrameStats> = {}, png?: Uint8Array): void {
    const full: FrameStats = {
      gaussian_count: 42,
      render_ms: 1.5,
      levels_used: [1, 2, 3],
      gamma: 8,
      view_index: 0,
      ...stats,
    };
    this.onmessage?.({
      data: encodeFrame(generation, full, png ?? new Uint8Array([1, 2, 3])),
    });
  }

  drop(): void {
    this.closed = true;
    this.onclose?.();
  }

  sentTypes(): string[] {
    return this.sent.map((s) => JSON.parse(s).type);
  }

  lastOfType(type: string): Record<string, unknown> | null {
    for (let i = this.sent.length - 1; i >= 0; i--) {
      const msg = JSON.parse(this.sent[i]);
      if (msg.type === type) return msg;
    }
    return null;
  }
}

export function helloAck(lMax = 3, gamma = 8): Record<string, unknown> {
  return {
    type: "hello_ack",
    protocol_version: 1,
    tau: 0.1,
    rho: 4,
    l_max: lMax,
    levels: Array.from({ length: lMax }, (_, i) => ({ level: i + 1, count: 10 * (i + 1) })),
    defaults: { gamma, update_period: 50 },
  };
}
