/**
 * Viewer session state machine.
 *
 * Owns the connection (hello handshake, reconnect with backoff), the orbit
 * camera, the LOD controls and the HUD. One frame request is in flight at a
 * time; camera/LOD edits are flushed before the next request goes out. The
 * socket is injected so tests can drive the machine without a server.
 */

import { FpsTracker, HudState } from "./hud.js";
import {
  LodState,
  clampGamma,
  createLod,
  debounce,
  setGamma,
  setLEnd,
  setLStart,
} from "./lod.js";
import {
  Intrinsics,
  OrbitState,
  createOrbit,
  orbitPose,
  rotate,
  zoom,
} from "./orbit.js";
import {
  FrameMessage,
  HelloAck,
  byeMessage,
  decodeFrame,
  helloMessage,
  parseServerText,
  requestFrameMessage,
  setLodMessage,
  setViewMessage,
} from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((event: { data: string | ArrayBuffer | Uint8Array }) => void) | null;
  onclose: (() => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export type Status = "idle" | "connecting" | "connected" | "retrying" | "failed";

export interface ViewerCallbacks {
  onFrame?: (frame: FrameMessage) => void;
  onHud?: (hud: HudState) => void;
  onStatus?: (status: Status, banner: string | null) => void;
  onBounds?: (ack: HelloAck) => void;
}

export interface ViewerOptions {
  url: string;
  socketFactory: SocketFactory;
  intrinsics?: Intrinsics;
  callbacks?: ViewerCallbacks;
  now?: () => number;
  scheduler?: { set: typeof setTimeout; clear: typeof clearTimeout };
  debounceMs?: number;
  maxBackoffMs?: number;
}

export class ViewerApp {
  status: Status = "idle";
  banner: string | null = null;
  orbit: OrbitState = createOrbit();
  lod: LodState | null = null;
  hello: HelloAck | null = null;
  hud: HudState = { fps: 0, stats: null, generation: null };

  private socket: SocketLike | null = null;
  private awaitingFrame = false;
  private viewDirty = true;
  private fps = new FpsTracker();
  private backoffMs = 500;
  private consecutiveErrors = 0;
  private retryHandle: ReturnType<typeof setTimeout> | undefined;
  private fatal = false;
  private readonly sendLodDebounced: { call: () => void; cancel: () => void };

  constructor(private readonly opts: ViewerOptions) {
    const timers = opts.scheduler ?? { set: setTimeout, clear: clearTimeout };
    this.sendLodDebounced = debounce(
      () => this.sendLodNow(),
      opts.debounceMs ?? 150,
      timers,
    );
  }

  private get intrinsics(): Intrinsics {
    return this.opts.intrinsics ?? { fx: 64, fy: 64, width: 64, height: 64 };
  }

  private setStatus(status: Status, banner: string | null = null): void {
    this.status = status;
    this.banner = banner;
    this.opts.callbacks?.onStatus?.(status, banner);
  }

  connect(): void {
    if (this.fatal) return;
    this.setStatus("connecting");
    const socket = this.opts.socketFactory(this.opts.url);
    this.socket = socket;
    socket.onopen = () => {
      this.backoffMs = 500;
      socket.send(helloMessage());
    };
    socket.onmessage = (event) => this.handleMessage(event.data);
    socket.onclose = () => {
      this.socket = null;
      this.awaitingFrame = false;
      if (this.fatal) return;
      this.setStatus("retrying", `connection lost, retrying in ${this.backoffMs} ms`);
      const timers = this.opts.scheduler ?? { set: setTimeout, clear: clearTimeout };
      this.retryHandle = timers.set(() => this.connect(), this.backoffMs);
      this.backoffMs = Math.min(this.backoffMs * 2, this.opts.maxBackoffMs ?? 8000);
    };
  }

  disconnect(): void {
    this.fatal = true;
    this.sendLodDebounced.cancel();
    if (this.retryHandle !== undefined) {
      (this.opts.scheduler ?? { clear: clearTimeout }).clear(this.retryHandle);
    }
    if (this.socket) {
      try {
        this.socket.send(byeMessage());
      } catch {
        // socket already gone
      }
      this.socket.close();
      this.socket = null;
    }
    this.setStatus("idle");
  }

  private handleMessage(data: string | ArrayBuffer | Uint8Array): void {
    if (typeof data === "string") {
      const msg = parseServerText(data);
      if (msg.type === "hello_ack") {
        this.hello = msg;
        const gamma = this.lod ? this.lod.gamma : clampGamma(msg.defaults.gamma);
        this.lod = this.lod
          ? { ...this.lod, lMax: msg.l_max }
          : { ...createLod(msg.l_max, gamma) };
        this.opts.callbacks?.onBounds?.(msg);
        this.setStatus("connected");
        this.fps.reset();
        this.viewDirty = true;
        this.sendLodNow();
        this.pump();
      } else if (msg.code === "protocol_version") {
        // version skew is not recoverable by retrying
        this.fatal = true;
        this.setStatus("failed", `protocol version mismatch: ${msg.message}`);
        this.socket?.close();
      } else {
        this.banner = `${msg.code}: ${msg.message}`;
        this.opts.callbacks?.onStatus?.(this.status, this.banner);
        if (this.awaitingFrame) {
          // the request that errored will produce no frame
          this.awaitingFrame = false;
          this.consecutiveErrors += 1;
          if (this.consecutiveErrors < 3) this.pump();
          // otherwise wait for the next user input instead of spinning
        }
      }
      return;
    }
    this.consecutiveErrors = 0;
    const frame = decodeFrame(data);
    const now = this.opts.now ?? (() => Date.now());
    this.fps.record(now());
    this.hud = {
      fps: this.fps.fps(),
      stats: frame.stats,
      generation: frame.generation,
    };
    this.opts.callbacks?.onHud?.(this.hud);
    this.opts.callbacks?.onFrame?.(frame);
    this.awaitingFrame = false;
    this.pump();
  }

  /** Flush pending camera state and keep exactly one request in flight. */
  private pump(): void {
    if (!this.socket || this.status !== "connected" || this.awaitingFrame) return;
    if (this.viewDirty) {
      this.socket.send(setViewMessage(orbitPose(this.orbit, this.intrinsics)));
      this.viewDirty = false;
    }
    this.awaitingFrame = true;
    this.socket.send(requestFrameMessage());
  }

  private sendLodNow(): void {
    if (!this.socket || !this.lod || this.status !== "connected") return;
    this.socket.send(setLodMessage(this.lod.lStart, this.lod.lEnd, this.lod.gamma));
  }

  // user input -------------------------------------------------------------

  orbitDrag(dAzimuth: number, dElevation: number): void {
    this.consecutiveErrors = 0;
    this.orbit = rotate(this.orbit, dAzimuth, dElevation);
    this.viewDirty = true;
    this.pump();
  }

  orbitZoom(factor: number): void {
    this.consecutiveErrors = 0;
    this.orbit = zoom(this.orbit, factor);
    this.viewDirty = true;
    this.pump();
  }

  adjustLStart(value: number): void {
    if (!this.lod) return;
    this.lod = setLStart(this.lod, value);
    this.sendLodDebounced.call();
  }

  adjustLEnd(value: number): void {
    if (!this.lod) return;
    this.lod = setLEnd(this.lod, value);
    this.sendLodDebounced.call();
  }

  adjustGamma(value: number): void {
    if (!this.lod) return;
    this.lod = setGamma(this.lod, value);
    this.sendLodDebounced.call();
  }
}
