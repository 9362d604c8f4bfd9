/**
 * Websocket channel for one annotation session, with automatic resume.
 *
 * The server keeps the playback cursor, so after a dropped connection the
 * client only has to reopen the same URL: streaming continues at the first
 * frame the server never sent. While disconnected the channel reports a
 * `paused` state so the UI can say so, and it retries with capped
 * exponential backoff until the stream ends, the session commits, or the
 * caller closes it.
 *
 * The socket constructor and the timer are injected so tests can drive the
 * whole lifecycle synchronously.
 */

import {
  commitMessage,
  markMessage,
  parseServerMessage,
  speedMessage,
  type CommittedMsg,
  type EndMsg,
  type ErrorMsg,
  type FrameMsg,
  type MarksMsg,
  type SpeedMsg,
} from "./protocol.js";

export interface WebSocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((event: { data: string }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
}

export type SocketFactory = (url: string) => WebSocketLike;

export type Scheduler = (fn: () => void, delayMs: number) => unknown;
export type Canceller = (handle: unknown) => void;

export type ChannelState =
  | "connecting"
  | "open"
  | "paused"
  | "ended"
  | "committed"
  | "closed";

export interface ChannelHandlers {
  onFrame?: (msg: FrameMsg) => void;
  onEnd?: (msg: EndMsg) => void;
  onMarks?: (msg: MarksMsg) => void;
  onSpeed?: (msg: SpeedMsg) => void;
  onCommitted?: (msg: CommittedMsg) => void;
  onError?: (msg: ErrorMsg) => void;
  onState?: (state: ChannelState) => void;
}

export interface ChannelOptions {
  backoffMs?: number;
  maxBackoffMs?: number;
  schedule?: Scheduler;
  cancel?: Canceller;
}

export class SessionChannel {
  /** Index of the last frame actually received, -1 before the first one. */
  lastIndex = -1;

  private ws: WebSocketLike | null = null;
  private stateValue: ChannelState = "closed";
  private retryHandle: unknown = null;
  private attempt = 0;
  private suspended = false;
  private readonly backoffMs: number;
  private readonly maxBackoffMs: number;
  private readonly schedule: Scheduler;
  private readonly cancel: Canceller;

  constructor(
    private readonly url: string,
    private readonly factory: SocketFactory,
    private readonly handlers: ChannelHandlers = {},
    options: ChannelOptions = {},
  ) {
    this.backoffMs = options.backoffMs ?? 500;
    this.maxBackoffMs = options.maxBackoffMs ?? 5000;
    this.schedule =
      options.schedule ?? ((fn, ms) => setTimeout(fn, ms));
    this.cancel =
      options.cancel ?? ((handle) => clearTimeout(handle as number));
  }

  get state(): ChannelState {
    return this.stateValue;
  }

  connect(): void {
    if (this.stateValue === "committed") return;
    this.suspended = false;
    this.setState("connecting");
    const ws = this.factory(this.url);
    this.ws = ws;
    ws.onopen = () => {
      this.attempt = 0;
      this.setState("open");
    };
    ws.onmessage = (event) => this.handleMessage(event.data);
    ws.onerror = () => {
      // The close handler does the actual recovery; nothing extra here.
    };
    ws.onclose = () => {
      if (ws !== this.ws) return; // stale socket from a previous attempt
      this.ws = null;
      if (this.stateValue === "closed" || this.stateValue === "committed") {
        return; // deliberate shutdown or committed session: stay put
      }
      // A drop after "end" still reconnects: the server's cursor sits past
      // the last frame, so the new socket just repeats "end" and the commit
      // handshake remains available.
      this.setState("paused");
      if (!this.suspended) this.scheduleReconnect();
    };
  }

  /**
   * Deliberate pause: drop the connection without scheduling a retry. The
   * server's cursor stops advancing, so `connect()` later resumes playback
   * exactly where it was paused.
   */
  pause(): void {
    if (this.stateValue !== "open" && this.stateValue !== "connecting") return;
    this.suspended = true;
    this.clearRetry();
    this.ws?.close();
  }

  /** Stop for good; no reconnect will be attempted. */
  close(): void {
    this.setState("closed");
    this.clearRetry();
    const ws = this.ws;
    this.ws = null;
    ws?.close();
  }

  sendMark(start: number, end: number): boolean {
    return this.sendRaw(markMessage(start, end));
  }

  sendSpeed(multiplier: number): boolean {
    return this.sendRaw(speedMessage(multiplier));
  }

  sendCommit(): boolean {
    return this.sendRaw(commitMessage());
  }

  private sendRaw(payload: string): boolean {
    const sendable = this.stateValue === "open" || this.stateValue === "ended";
    if (this.ws === null || !sendable) return false;
    this.ws.send(payload);
    return true;
  }

  private handleMessage(raw: string): void {
    let msg;
    try {
      msg = parseServerMessage(raw);
    } catch (err) {
      this.handlers.onError?.({
        v: 1,
        type: "error",
        message: err instanceof Error ? err.message : String(err),
      });
      return;
    }
    switch (msg.type) {
      case "frame":
        this.lastIndex = msg.index;
        this.handlers.onFrame?.(msg);
        break;
      case "end":
        this.setState("ended");
        this.handlers.onEnd?.(msg);
        break;
      case "marks":
        this.handlers.onMarks?.(msg);
        break;
      case "speed":
        this.handlers.onSpeed?.(msg);
        break;
      case "committed":
        this.setState("committed");
        this.clearRetry();
        this.handlers.onCommitted?.(msg);
        break;
      case "error":
        this.handlers.onError?.(msg);
        break;
    }
  }

  private scheduleReconnect(): void {
    this.clearRetry();
    const delay = Math.min(
      this.backoffMs * 2 ** this.attempt,
      this.maxBackoffMs,
    );
    this.attempt += 1;
    this.retryHandle = this.schedule(() => {
      this.retryHandle = null;
      if (this.stateValue === "paused") this.connect();
    }, delay);
  }

  private clearRetry(): void {
    if (this.retryHandle !== null) {
      this.cancel(this.retryHandle);
      this.retryHandle = null;
    }
  }

  private setState(state: ChannelState): void {
    if (state === this.stateValue) return;
    this.stateValue = state;
    this.handlers.onState?.(state);
  }
}
