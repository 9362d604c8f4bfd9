/**
 * Browser entry point: wires the protocol, channel, recorder, and REST client
 * to the page. All decision logic lives in the imported modules; this file
 * only moves data between them and the DOM.
 */

import { MarkRecorder } from "./marks.js";
import { counterText, overlayFor, RateMeter } from "./playback.js";
import type { FrameMsg } from "./protocol.js";
import { SessionChannel, type ChannelState } from "./socket.js";
import { ServiceClient } from "./status.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
}

const serviceUrlInput = el<HTMLInputElement>("service-url");
const presetSelect = el<HTMLSelectElement>("preset");
const lengthInput = el<HTMLInputElement>("episode-len");
const seedInput = el<HTMLInputElement>("seed");
const speedInput = el<HTMLInputElement>("speed");
const policySelect = el<HTMLSelectElement>("policy");
const startButton = el<HTMLButtonElement>("start");
const pauseButton = el<HTMLButtonElement>("pause");
const commitButton = el<HTMLButtonElement>("commit");
const trainButton = el<HTMLButtonElement>("train");
const slowerButton = el<HTMLButtonElement>("slower");
const fasterButton = el<HTMLButtonElement>("faster");
const canvas = el<HTMLCanvasElement>("viewport");
const counterNode = el<HTMLSpanElement>("counter");
const rateNode = el<HTMLSpanElement>("rate");
const stateNode = el<HTMLSpanElement>("channel-state");
const marksNode = el<HTMLUListElement>("marks");
const timelineNode = el<HTMLDivElement>("timeline");
const noticeNode = el<HTMLDivElement>("notice");

const ctx = canvas.getContext("2d");
if (ctx === null) throw new Error("2d canvas unsupported");
ctx.imageSmoothingEnabled = false;

let client: ServiceClient | null = null;
let channel: SessionChannel | null = null;
let sessionId: string | null = null;
let totalFrames = 0;
let currentSpeed = 1;
let drawnIndex = -1;
let paused = false;

const recorder = new MarkRecorder();
const meter = new RateMeter();

function notice(text: string, kind: "info" | "warn" = "info"): void {
  noticeNode.textContent = text;
  noticeNode.className = kind;
}

function renderMarks(marks: Array<[number, number]>): void {
  marksNode.replaceChildren(
    ...marks.map(([start, end]) => {
      const li = document.createElement("li");
      li.textContent = start === end ? `${start}` : `${start}–${end}`;
      return li;
    }),
  );
  timelineNode.replaceChildren(
    ...marks.map(([start, end]) => {
      const seg = document.createElement("div");
      seg.className = "mark-segment";
      const left = totalFrames > 0 ? (start / totalFrames) * 100 : 0;
      const width =
        totalFrames > 0 ? ((end - start + 1) / totalFrames) * 100 : 0;
      seg.style.left = `${left}%`;
      seg.style.width = `${Math.max(width, 0.4)}%`;
      return seg;
    }),
  );
}

function renderFrame(msg: FrameMsg): void {
  const img = new Image();
  img.onload = () => {
    if (msg.index < drawnIndex) return; // an older frame finished decoding late
    drawnIndex = msg.index;
    const scale = canvas.width / img.width;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.drawImage(img, 0, 0, canvas.width, canvas.height);
    const overlay = overlayFor(msg);
    if (overlay !== null) {
      ctx.strokeStyle = overlay.style.color;
      ctx.lineWidth = 2;
      ctx.setLineDash(overlay.style.dash);
      ctx.strokeRect(
        overlay.x * scale,
        overlay.y * scale,
        overlay.w * scale,
        overlay.h * scale,
      );
      ctx.setLineDash([]);
      if (overlay.style.label !== "") {
        ctx.fillStyle = overlay.style.color;
        ctx.font = "14px monospace";
        ctx.fillText(
          overlay.style.label,
          overlay.x * scale,
          Math.max(12, overlay.y * scale - 4),
        );
      }
    }
    counterNode.textContent = counterText(msg.index, totalFrames, currentSpeed);
  };
  img.src = `data:image/png;base64,${msg.png_base64}`;
  const now = performance.now();
  meter.push(now);
  rateNode.textContent = `${meter.framesPerMinute(now).toFixed(0)} frames/min`;
}

function setChannelState(state: ChannelState): void {
  stateNode.textContent = paused && state === "paused" ? "paused" : state;
  pauseButton.textContent = paused ? "resume" : "pause";
  commitButton.disabled = !(state === "open" || state === "ended");
}

async function start(): Promise<void> {
  channel?.close();
  recorder.reset();
  drawnIndex = -1;
  paused = false;
  client = new ServiceClient(
    serviceUrlInput.value.replace(/\/+$/, ""),
    (url, init) => fetch(url, init),
  );
  currentSpeed = Number(speedInput.value) || 1;
  try {
    const run = await client.createRun(
      {
        preset: presetSelect.value,
        episode_len: Number(lengthInput.value) || 600,
        seed: Number(seedInput.value) || 0,
      },
      policySelect.value === "online" ? "online" : "net",
    );
    const session = await client.createSession(
      run.run_id,
      run.episode_id,
      currentSpeed,
    );
    sessionId = session.session_id;
    totalFrames = session.frames;
    notice(
      `session ${session.session_id} on ${run.episode_id} ` +
        `(${session.frames} frames)`,
    );
  } catch (err) {
    notice(err instanceof Error ? err.message : String(err), "warn");
    return;
  }
  renderMarks([]);
  channel = new SessionChannel(
    client.streamUrl(sessionId),
    (url) => new WebSocket(url),
    {
      onFrame: renderFrame,
      onMarks: (msg) => renderMarks(msg.marks),
      onSpeed: (msg) => {
        currentSpeed = msg.multiplier;
        speedInput.value = String(msg.multiplier);
      },
      onEnd: () => notice("episode finished — commit to store rewards"),
      onCommitted: (msg) =>
        notice(
          `committed: ${msg.tuples_appended} reward tuples appended ` +
            `(replay now ${msg.replay_size})`,
        ),
      onError: (msg) => notice(msg.message, "warn"),
      onState: setChannelState,
    },
  );
  channel.connect();
}

function togglePause(): void {
  if (channel === null) return;
  if (paused) {
    paused = false;
    channel.connect();
  } else {
    paused = true;
    channel.pause();
  }
  setChannelState(channel.state);
}

function nudgeSpeed(factor: number): void {
  if (channel === null) return;
  const next = Math.max(0.25, currentSpeed * factor);
  channel.sendSpeed(next);
}

async function triggerTrain(): Promise<void> {
  if (client === null) return;
  const result = await client.triggerTrain();
  if (!result.ok) {
    notice(
      result.busy
        ? "training already running — try again when it finishes"
        : result.message,
      "warn",
    );
    return;
  }
  notice(`train job ${result.jobId}: queued`);
  const final = await client.pollTrain(result.jobId, (status) => {
    notice(`train job ${status.job_id}: ${status.status}`);
  });
  if (final.status === "failed") {
    notice(`train job failed: ${final.error ?? "unknown error"}`, "warn");
  }
}

window.addEventListener("keydown", (event) => {
  if (event.code !== "Space" || event.repeat) return;
  if (event.target instanceof HTMLInputElement) return;
  event.preventDefault();
  if (channel !== null && channel.lastIndex >= 0) {
    recorder.keyDown(channel.lastIndex);
  }
});

window.addEventListener("keyup", (event) => {
  if (event.code !== "Space") return;
  if (event.target instanceof HTMLInputElement) return;
  event.preventDefault();
  if (channel === null) return;
  const mark = recorder.keyUp(Math.max(channel.lastIndex, 0));
  if (mark !== null) {
    if (!channel.sendMark(mark.start, mark.end) && client && sessionId) {
      // Channel is down (paused or reconnecting): fall back to REST so the
      // mark is never lost; the response is the server's merged set.
      client
        .submitMarks(sessionId, [[mark.start, mark.end]])
        .then(renderMarks)
        .catch((err: unknown) =>
          notice(err instanceof Error ? err.message : String(err), "warn"),
        );
    }
  }
});

startButton.addEventListener("click", () => void start());
pauseButton.addEventListener("click", togglePause);
commitButton.addEventListener("click", () => channel?.sendCommit());
trainButton.addEventListener("click", () => void triggerTrain());
slowerButton.addEventListener("click", () => nudgeSpeed(0.5));
fasterButton.addEventListener("click", () => nudgeSpeed(2));

notice("configure the episode and press start");
