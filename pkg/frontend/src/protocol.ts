/**
 * Typed wire protocol for the tracker annotation service.
 *
 * Every message — REST body, REST response, and websocket frame — carries a
 * version field `v`. This module owns the TypeScript shapes, the runtime
 * guards for inbound messages, and the builders for outbound ones, so the
 * rest of the client never touches untyped JSON.
 */

export const PROTOCOL_V = 1 as const;

// ------------------------------------------------------------- server → us

export interface FrameMsg {
  v: typeof PROTOCOL_V;
  type: "frame";
  index: number;
  png_base64: string;
  box: [number, number, number, number] | null;
  action: [string, string];
}

export interface EndMsg {
  v: typeof PROTOCOL_V;
  type: "end";
  index: number;
}

export interface MarksMsg {
  v: typeof PROTOCOL_V;
  type: "marks";
  marks: Array<[number, number]>;
}

export interface SpeedMsg {
  v: typeof PROTOCOL_V;
  type: "speed";
  multiplier: number;
}

export interface CommittedMsg {
  v: typeof PROTOCOL_V;
  type: "committed";
  tuples_appended: number;
  replay_size: number;
}

export interface ErrorMsg {
  v: typeof PROTOCOL_V;
  type: "error";
  message: string;
}

export type ServerMsg =
  | FrameMsg
  | EndMsg
  | MarksMsg
  | SpeedMsg
  | CommittedMsg
  | ErrorMsg;

function isRecord(x: unknown): x is Record<string, unknown> {
  return typeof x === "object" && x !== null;
}

function isIntPair(x: unknown): x is [number, number] {
  return (
    Array.isArray(x) &&
    x.length === 2 &&
    x.every((n) => typeof n === "number" && Number.isFinite(n))
  );
}

function isBox(x: unknown): x is [number, number, number, number] {
  return (
    Array.isArray(x) &&
    x.length === 4 &&
    x.every((n) => typeof n === "number" && Number.isFinite(n))
  );
}

/** Parse one raw websocket payload; throws on anything off-protocol. */
export function parseServerMessage(raw: string): ServerMsg {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    throw new Error("stream message is not valid JSON");
  }
  if (!isRecord(data)) throw new Error("stream message is not an object");
  if (data.v !== PROTOCOL_V) {
    throw new Error(`unsupported protocol version ${String(data.v)}`);
  }
  switch (data.type) {
    case "frame": {
      if (
        typeof data.index !== "number" ||
        typeof data.png_base64 !== "string" ||
        !(data.box === null || isBox(data.box)) ||
        !Array.isArray(data.action) ||
        data.action.length !== 2 ||
        !data.action.every((a) => typeof a === "string")
      ) {
        throw new Error("malformed frame message");
      }
      return data as unknown as FrameMsg;
    }
    case "end": {
      if (typeof data.index !== "number") {
        throw new Error("malformed end message");
      }
      return data as unknown as EndMsg;
    }
    case "marks": {
      if (!Array.isArray(data.marks) || !data.marks.every(isIntPair)) {
        throw new Error("malformed marks message");
      }
      return data as unknown as MarksMsg;
    }
    case "speed": {
      if (typeof data.multiplier !== "number") {
        throw new Error("malformed speed message");
      }
      return data as unknown as SpeedMsg;
    }
    case "committed": {
      if (
        typeof data.tuples_appended !== "number" ||
        typeof data.replay_size !== "number"
      ) {
        throw new Error("malformed committed message");
      }
      return data as unknown as CommittedMsg;
    }
    case "error": {
      if (typeof data.message !== "string") {
        throw new Error("malformed error message");
      }
      return data as unknown as ErrorMsg;
    }
    default:
      throw new Error(`unknown stream message type ${String(data.type)}`);
  }
}

// ------------------------------------------------------------- us → server

export function markMessage(start: number, end: number): string {
  return JSON.stringify({ v: PROTOCOL_V, type: "mark", start, end });
}

export function speedMessage(multiplier: number): string {
  return JSON.stringify({ v: PROTOCOL_V, type: "speed", multiplier });
}

export function commitMessage(): string {
  return JSON.stringify({ v: PROTOCOL_V, type: "commit" });
}

// ------------------------------------------------------------ REST shapes

export interface EpisodeRequest {
  preset: string;
  episode_len: number;
  seed: number;
  overrides?: Record<string, unknown>;
}

export interface RunCreated {
  v: number;
  run_id: string;
  episode_id: string;
  frames: number;
  stride: number;
}

export interface SessionCreated {
  v: number;
  session_id: string;
  frames: number;
  stride: number;
  speed: number;
}

export interface SessionStatus {
  v: number;
  session_id: string;
  status: "streaming" | "committed";
  cursor: number;
  speed: number;
  marks: Array<[number, number]>;
}

export interface CommitResult {
  v: number;
  tuples_appended: number;
  replay_size: number;
}

export interface TrainJobStatus {
  v: number;
  job_id: string;
  status: "queued" | "running" | "done" | "failed";
  error?: string;
}
