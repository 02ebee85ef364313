/**
 * Minimal RFC 6455 WebSocket client over node:net, exposing the same
 * surface as the browser WebSocket that ViewerApp needs (SocketLike).
 * Used only by the node-side integration tests; the browser build uses the
 * native WebSocket.
 */

import { createHash, randomBytes } from "node:crypto";
import { Socket, connect } from "node:net";

import type { SocketLike } from "./app.js";

const GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";

export class NodeWebSocket implements SocketLike {
  onopen: (() => void) | null = null;
  onmessage: ((event: { data: string | ArrayBuffer | Uint8Array }) => void) | null = null;
  onclose: (() => void) | null = null;

  private sock: Socket;
  private buffer = Buffer.alloc(0);
  private handshakeDone = false;
  private expectedAccept: string;
  private closed = false;

  constructor(url: string) {
    const u = new URL(url);
    if (u.protocol !== "ws:") throw new Error(`unsupported protocol ${u.protocol}`);
    const key = randomBytes(16).toString("base64");
    this.expectedAccept = createHash("sha1").update(key + GUID).digest("base64");
    this.sock = connect(Number(u.port || 80), u.hostname);
    this.sock.on("connect", () => {
      this.sock.write(
        `GET ${u.pathname} HTTP/1.1\r\n` +
        `Host: ${u.host}\r\n` +
        "Upgrade: websocket\r\nConnection: Upgrade\r\n" +
        `Sec-WebSocket-Key: ${key}\r\n` +
        "Sec-WebSocket-Version: 13\r\n\r\n",
      );
    });
    this.sock.on("data", (chunk: Buffer) => this.feed(chunk));
    this.sock.on("close", () => {
      if (!this.closed) {
        this.closed = true;
        this.onclose?.();
      }
    });
    this.sock.on("error", () => this.sock.destroy());
  }

  send(data: string): void {
    const payload = Buffer.from(data, "utf8");
    const mask = randomBytes(4);
    let header: Buffer;
    if (payload.length < 126) {
      header = Buffer.from([0x81, 0x80 | payload.length]);
    } else if (payload.length < 65536) {
      header = Buffer.alloc(4);
      header[0] = 0x81;
      header[1] = 0x80 | 126;
      header.writeUInt16BE(payload.length, 2);
    } else {
      header = Buffer.alloc(10);
      header[0] = 0x81;
      header[1] = 0x80 | 127;
      header.writeBigUInt64BE(BigInt(payload.length), 2);
    }
    const masked = Buffer.from(payload);
    for (let i = 0; i < masked.length; i++) masked[i] ^= mask[i % 4];
    this.sock.write(Buffer.concat([header, mask, masked]));
  }

  close(): void {
    if (this.closed) return;
    this.closed = true;
    this.sock.end();
    this.onclose?.();
  }

  private feed(chunk: Buffer): void {
    this.buffer = Buffer.concat([this.buffer, chunk]);
    if (!this.handshakeDone) {
      const end = this.buffer.indexOf("\r\n\r\n");
      if (end < 0) return;
      const head = this.buffer.subarray(0, end).toString();
      this.buffer = this.buffer.subarray(end + 4);
      if (!head.includes("101") || !head.includes(this.expectedAccept)) {
        this.sock.destroy();
        return;
      }
      this.handshakeDone = true;
      this.onopen?.();
    }
    for (;;) {
      const frame = this.tryReadFrame();
      if (!frame) return;
      const [opcode, payload] = frame;
      if (opcode === 0x1) {
        this.onmessage?.({ data: payload.toString("utf8") });
      } else if (opcode === 0x2) {
        this.onmessage?.({ data: new Uint8Array(payload) });
      } else if (opcode === 0x8) {
        this.close();
        return;
      } else if (opcode === 0x9) {
        this.pong(payload);
      }
    }
  }

  private tryReadFrame(): [number, Buffer] | null {
    if (this.buffer.length < 2) return null;
    const opcode = this.buffer[0] & 0x0f;
    let len = this.buffer[1] & 0x7f;
    let offset = 2;
    if (len === 126) {
      if (this.buffer.length < 4) return null;
      len = this.buffer.readUInt16BE(2);
      offset = 4;
    } else if (len === 127) {
      if (this.buffer.length < 10) return null;
      len = Number(this.buffer.readBigUInt64BE(2));
      offset = 10;
    }
    if (this.buffer.length < offset + len) return null;
    const payload = this.buffer.subarray(offset, offset + len);
    this.buffer = this.buffer.subarray(offset + len);
    return [opcode, Buffer.from(payload)];
  }

  private pong(payload: Buffer): void {
    const mask = randomBytes(4);
    const masked = Buffer.from(payload);
    for (let i = 0; i < masked.length; i++) masked[i] ^= mask[i % 4];
    this.sock.write(Buffer.concat([Buffer.from([0x8a, 0x80 | masked.length]), mask, masked]));
  }
}
