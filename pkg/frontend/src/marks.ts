/**
 * Spacebar mark recorder.
 *
 * Holding the key spans an interval of frames: key-down opens the interval at
 * the frame currently on screen, key-up closes it at the frame on screen then.
 * Two separate taps therefore produce two disjoint intervals, and a key held
 * across a pause/resume still produces exactly one, because pausing playback
 * does not touch the recorder.
 *
 * Browsers fire repeated `keydown` events while a key is held (auto-repeat);
 * those must not open new intervals, so `keyDown` while an interval is open
 * is a no-op.
 */

export interface MarkInterval {
  start: number;
  end: number;
}

export class MarkRecorder {
  private openStart: number | null = null;

  /** True while a key-down has been seen without its matching key-up. */
  get active(): boolean {
    return this.openStart !== null;
  }

  /** Frame at which the currently open interval started, if any. */
  get openedAt(): number | null {
    return this.openStart;
  }

  /** Key pressed while frame `frame` is on screen. Auto-repeat is ignored. */
  keyDown(frame: number): void {
    if (this.openStart === null) {
      this.openStart = frame;
    }
  }

  /**
   * Key released while frame `frame` is on screen. Returns the completed
   * interval, or null when no interval was open (e.g. the key was pressed
   * before the page had focus).
   */
  keyUp(frame: number): MarkInterval | null {
    if (this.openStart === null) return null;
    const start = this.openStart;
    this.openStart = null;
    // Playback only moves forward, but clamp defensively so a mark is never
    // inverted if the caller feeds frames out of order.
    return { start: Math.min(start, frame), end: Math.max(start, frame) };
  }

  /** Drop any half-open interval (used when a session ends or commits). */
  reset(): void {
    this.openStart = null;
  }
}

/**
 * Union of closed integer intervals, sorted and non-overlapping. Matches the
 * server's merge rule (adjacent intervals coalesce) so the client can sanity
 * check acknowledgements, but the displayed set always comes from the server.
 */
export function mergeIntervals(
  intervals: Array<[number, number]>,
): Array<[number, number]> {
  const sorted = [...intervals].sort((a, b) => a[0] - b[0] || a[1] - b[1]);
  const out: Array<[number, number]> = [];
  for (const [start, end] of sorted) {
    const last = out[out.length - 1];
    if (last !== undefined && start <= last[1] + 1) {
      last[1] = Math.max(last[1], end);
    } else {
      out.push([start, end]);
    }
  }
  return out;
}
