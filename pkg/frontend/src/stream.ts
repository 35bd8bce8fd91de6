/**
 * Connection management for the render stream.
 *
 * Handles the hello handshake, drops out-of-order frames so displayed
 * sequence numbers are monotone, surfaces status changes for the banner,
 * and reconnects with exponential backoff after a drop.
 */

import { DecodedFrame, decodeFrame, helloMessage, PROTOCOL_VERSION } from "./protocol.js";

export type StreamStatus = "connecting" | "connected" | "error" | "closed";

export interface SocketLike {
  binaryType: string;
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  send(data: string): void;
  close(): void;
  readyState: number;
}

export interface StreamCallbacks {
  onFrame(frame: DecodedFrame): void;
  onStatus(status: StreamStatus, detail?: string): void;
  onText?(msg: Record<string, unknown>): void;
  /** Called with the delay before a reconnect attempt; mainly for the UI countdown. */
  onRetryScheduled?(delayMs: number): void;
}

export interface StreamOptions {
  socketFactory?: (url: string) => SocketLike;
  scheduler?: (fn: () => void, ms: number) => unknown;
  initialBackoffMs?: number;
  maxBackoffMs?: number;
}

const OPEN = 1;

export class FrameStream {
  private socket: SocketLike | null = null;
  private backoffMs: number;
  private readonly initialBackoffMs: number;
  private readonly maxBackoffMs: number;
  private lastSequence = 0;
  private helloDone = false;
  private stopped = false;

  constructor(
    private readonly url: string,
    private readonly callbacks: StreamCallbacks,
    private readonly options: StreamOptions = {},
  ) {
    this.initialBackoffMs = options.initialBackoffMs ?? 500;
    this.maxBackoffMs = options.maxBackoffMs ?? 8000;
    this.backoffMs = this.initialBackoffMs;
  }

  connect(): void {
    this.stopped = false;
    this.helloDone = false;
    this.callbacks.onStatus("connecting");
    const factory = this.options.socketFactory ?? ((u: string) => new WebSocket(u) as unknown as SocketLike);
    const ws = factory(this.url);
    ws.binaryType = "arraybuffer";
    this.socket = ws;
    ws.onopen = () => {
      // server speaks first; nothing to do until its hello arrives
    };
    ws.onmessage = (ev) => this.handleMessage(ev.data);
    ws.onerror = () => {
      this.callbacks.onStatus("error", "socket error");
    };
    ws.onclose = () => {
      this.socket = null;
      if (!this.stopped) {
        this.callbacks.onStatus("closed");
        this.scheduleReconnect();
      }
    };
  }

  close(): void {
    this.stopped = true;
    this.socket?.close();
    this.socket = null;
  }

  get connected(): boolean {
    return this.helloDone && this.socket !== null && this.socket.readyState === OPEN;
  }

  /** Send a JSON control message; silently dropped while disconnected. */
  send(text: string): boolean {
    if (!this.connected || !this.socket) return false;
    this.socket.send(text);
    return true;
  }

  private handleMessage(data: unknown): void {
    if (typeof data === "string") {
      let msg: Record<string, unknown>;
      try {
        msg = JSON.parse(data);
      } catch {
        console.warn("viewer: malformed text frame dropped");
        return;
      }
      if (msg.type === "hello") {
        if (msg.version !== PROTOCOL_VERSION) {
          this.stopped = true; // no point retrying a version mismatch
          this.callbacks.onStatus("error", `protocol version ${msg.version}, viewer speaks ${PROTOCOL_VERSION}`);
          this.socket?.close();
          return;
        }
        this.socket?.send(helloMessage());
        this.helloDone = true;
        this.backoffMs = this.initialBackoffMs;
        this.callbacks.onStatus("connected");
        return;
      }
      this.callbacks.onText?.(msg);
      return;
    }
    // binary frame
    try {
      const frame = decodeFrame(data as ArrayBuffer);
      if (frame.meta.sequence <= this.lastSequence) {
        console.warn(`viewer: stale frame ${frame.meta.sequence} <= ${this.lastSequence} dropped`);
        return;
      }
      this.lastSequence = frame.meta.sequence;
      this.callbacks.onFrame(frame);
    } catch (err) {
      console.warn("viewer: malformed frame dropped:", err);
    }
  }

  private scheduleReconnect(): void {
    const delay = this.backoffMs;
    this.backoffMs = Math.min(this.backoffMs * 2, this.maxBackoffMs);
    this.callbacks.onRetryScheduled?.(delay);
    const schedule = this.options.scheduler ?? ((fn: () => void, ms: number) => setTimeout(fn, ms));
    schedule(() => {
      if (!this.stopped) this.connect();
    }, delay);
  }
}

/** Exponential moving average over frame intervals, reported as FPS. */
export class FpsMeter {
  private lastTs: number | null = null;
  private ema: number | null = null;

  constructor(private readonly alpha = 1 / 10) {}

  tick(timestampMs: number): number | null {
    if (this.lastTs !== null) {
      const dt = timestampMs - this.lastTs;
      if (dt > 0) {
        this.ema = this.ema === null ? dt : this.alpha * dt + (1 - this.alpha) * this.ema;
      }
    }
    this.lastTs = timestampMs;
    return this.fps;
  }

  get fps(): number | null {
    return this.ema === null ? null : 1000 / this.ema;
  }
}

/**
 * Coalesces camera updates: any number of drags within one animation tick
 * produce at most one outgoing message. The UI never floods the server.
 */
export class CameraCoalescer {
  private pending: string | null = null;
  private scheduled = false;

  constructor(
    private readonly sendFn: (text: string) => boolean,
    private readonly requestTick: (fn: () => void) => unknown,
  ) {}

  update(message: string): void {
    this.pending = message;
    if (!this.scheduled) {
      this.scheduled = true;
      this.requestTick(() => this.flush());
    }
  }

  private flush(): void {
    this.scheduled = false;
    if (this.pending !== null) {
      const msg = this.pending;
      this.pending = null;
      this.sendFn(msg);
    }
  }
}
