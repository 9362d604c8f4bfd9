/**
 * Pure playback helpers: box-overlay styling, the frame/speed counter, and a
 * sliding-window rate meter. Everything here is canvas-agnostic so it can be
 * tested without a DOM; `main.ts` does the actual drawing.
 */

import type { FrameMsg } from "./protocol.js";

export interface OverlayStyle {
  /** CSS stroke colour. */
  color: string;
  /** Canvas line-dash pattern; empty array means a solid line. */
  dash: number[];
  /** Short label drawn next to the box. */
  label: string;
}

export interface Overlay {
  x: number;
  y: number;
  w: number;
  h: number;
  style: OverlayStyle;
}

const TRACK_STYLE: OverlayStyle = { color: "#2ecc71", dash: [], label: "" };
const REINIT_STYLE: OverlayStyle = {
  color: "#f39c12",
  dash: [4, 3],
  label: "reinit",
};

/**
 * Overlay for one frame: null when the tracker reported nothing, a solid
 * green box for an ordinary search step, and a visibly distinct dashed amber
 * box when the step was a restart (the motion action's search window was
 * placed afresh rather than around the previous estimate).
 */
export function overlayFor(msg: FrameMsg): Overlay | null {
  if (msg.box === null) return null;
  const [x, y, w, h] = msg.box;
  const restarted = msg.action[0] === "REINIT";
  return { x, y, w, h, style: restarted ? REINIT_STYLE : TRACK_STYLE };
}

/** "frame 57 / 600 · 20x" — both index and playback speed stay visible. */
export function counterText(
  index: number,
  total: number,
  speed: number,
): string {
  const mult = Number.isInteger(speed) ? String(speed) : speed.toFixed(1);
  return `frame ${index} / ${total} · ${mult}x`;
}

/**
 * Sliding-window arrival-rate meter. Feed it the wall-clock time of each
 * frame; it reports frames per minute over the most recent window so the
 * operator can confirm the stream really runs at the advertised speed.
 */
export class RateMeter {
  private times: number[] = [];

  constructor(private readonly windowMs: number = 5000) {}

  push(nowMs: number): void {
    this.times.push(nowMs);
    const cutoff = nowMs - this.windowMs;
    while (this.times.length > 0 && (this.times[0] as number) < cutoff) {
      this.times.shift();
    }
  }

  framesPerMinute(nowMs: number): number {
    const cutoff = nowMs - this.windowMs;
    const ts = this.times.filter((t) => t >= cutoff);
    if (ts.length < 2) return 0;
    const spanMs = (ts[ts.length - 1] as number) - (ts[0] as number);
    if (spanMs <= 0) return 0;
    return ((ts.length - 1) / spanMs) * 60_000;
  }
}
