/**
 * Wire protocol for the flod frame service.
 *
 * Text messages carry JSON envelopes; frames arrive as one binary message:
 * a 4-byte big-endian header length, the JSON header, then the PNG payload.
 */

export const PROTOCOL_VERSION = 1;

export interface FrameStats {
  gaussian_count: number;
  render_ms: number;
  levels_used: number[];
  gamma: number;
  view_index: number;
}

export interface FrameMessage {
  type: "frame";
  generation: number;
  stats: FrameStats;
  png: Uint8Array;
}

export interface HelloAck {
  type: "hello_ack";
  protocol_version: number;
  tau: number;
  rho: number;
  l_max: number;
  levels: { level: number; count: number }[];
  defaults: { gamma: number; update_period: number };
}

export interface ErrorMessage {
  type: "error";
  code: string;
  message: string;
}

export type ServerText = HelloAck | ErrorMessage;

export interface ViewPose {
  rotation_wxyz: [number, number, number, number];
  translation: [number, number, number];
  fx: number;
  fy: number;
  width: number;
  height: number;
}

export function helloMessage(): string {
  return JSON.stringify({ type: "hello", protocol_version: PROTOCOL_VERSION });
}

export function setViewMessage(pose: ViewPose): string {
  return JSON.stringify({ type: "set_view", ...pose });
}

export function setLodMessage(lStart: number, lEnd: number, gamma: number): string {
  return JSON.stringify({
    type: "set_lod",
    l_start: lStart,
    l_end: lEnd,
    gamma,
  });
}

export function requestFrameMessage(): string {
  return JSON.stringify({ type: "request_frame" });
}

export function byeMessage(): string {
  return JSON.stringify({ type: "bye" });
}

export function parseServerText(raw: string): ServerText {
  const msg = JSON.parse(raw);
  if (msg.type !== "hello_ack" && msg.type !== "error") {
    throw new Error(`unexpected server text message: ${msg.type}`);
  }
  return msg as ServerText;
}

/** Decode a binary frame message into header + PNG bytes. */
export function decodeFrame(data: ArrayBuffer | Uint8Array): FrameMessage {
  const bytes = data instanceof Uint8Array ? data : new Uint8Array(data);
  if (bytes.byteLength < 4) {
    throw new Error("frame message shorter than its header length field");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const headerLen = view.getUint32(0, false);
  if (4 + headerLen > bytes.byteLength) {
    throw new Error("frame header length exceeds message size");
  }
  const headerText = new TextDecoder().decode(bytes.subarray(4, 4 + headerLen));
  const header = JSON.parse(headerText);
  if (header.type !== "frame") {
    throw new Error(`binary message is not a frame: ${header.type}`);
  }
  return {
    type: "frame",
    generation: header.generation,
    stats: header.stats as FrameStats,
    png: bytes.subarray(4 + headerLen),
  };
}

/** Encode a frame message (used by tests to fabricate server frames). */
export function encodeFrame(
  generation: number,
  stats: FrameStats,
  png: Uint8Array,
): Uint8Array {
  const header = new TextEncoder().encode(
    JSON.stringify({ type: "frame", generation, stats }),
  );
  const out = new Uint8Array(4 + header.byteLength + png.byteLength);
  new DataView(out.buffer).setUint32(0, header.byteLength, false);
  out.set(header, 4);
  out.set(png, 4 + header.byteLength);
  return out;
}
