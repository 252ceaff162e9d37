/**
 * Thin scripting bindings over the slotserve engine API.
 *
 * createEngine(configPath) spawns one engine process (a Python shim speaking
 * JSON-lines over stdio) and returns a handle exposing generate/prefill/
 * release/shutdown with the same semantics and token outputs as the native
 * CLI. Errors cross the boundary as (name, message) pairs and surface as
 * EngineError with `errorName` set.
 */

import { spawn, type ChildProcessWithoutNullStreams } from "node:child_process";
import { createInterface, type Interface } from "node:readline";
import { fileURLToPath } from "node:url";
import path from "node:path";

export interface SpeculativeStats {
  proposed: number;
  accepted: number;
  accept_ratio: number;
}

export interface RequestStats {
  prefill_ms: number;
  decode_ms: number;
  total_ms: number;
  prompt_tokens: number;
  new_tokens: number;
  per_step_ms: number[];
  speculative?: SpeculativeStats;
}

export interface GenerateResult {
  tokens: number[];
  stats: RequestStats;
}

export interface EngineOptions {
  /** Python interpreter used for the engine process (default: $SLOTSERVE_PYTHON or python3). */
  pythonPath?: string;
  /** Override the engine shim script location. */
  shimPath?: string;
}

export class EngineError extends Error {
  constructor(public readonly errorName: string, message: string) {
    super(message);
    this.name = errorName;
  }
}

export class ClosedHandleError extends EngineError {
  constructor(message = "engine handle is closed") {
    super("ClosedHandle", message);
  }
}

interface WireResponse {
  id: number | null;
  ok: boolean;
  event?: string;
  result?: unknown;
  error?: { name: string; message: string };
}

const defaultShimPath = () =>
  path.join(path.dirname(fileURLToPath(import.meta.url)), "..", "engine_shim.py");

export class EngineHandle {
  private child: ChildProcessWithoutNullStreams;
  private rl: Interface;
  private pending = new Map<number, { resolve: (v: unknown) => void; reject: (e: Error) => void }>();
  private nextId = 1;
  private queue: Promise<unknown> = Promise.resolve();
  private closed = false;
  private exited = false;

  private constructor(child: ChildProcessWithoutNullStreams) {
    this.child = child;
    this.rl = createInterface({ input: child.stdout });
    this.rl.on("line", (line) => this.onLine(line));
    child.stdin.on("error", () => {
      /* EPIPE when the process died mid-write; the exit handler rejects pending calls */
    });
    child.on("exit", () => {
      this.exited = true;
      this.closed = true;
      const err = new EngineError("ProcessExited", "engine process exited");
      for (const { reject } of this.pending.values()) reject(err);
      this.pending.clear();
    });
  }

  /** Spawn an engine for the given config; resolves once slots are warmed. */
  static create(configPath: string, options: EngineOptions = {}): Promise<EngineHandle> {
    const python = options.pythonPath ?? process.env.SLOTSERVE_PYTHON ?? "python3";
    const shim = options.shimPath ?? defaultShimPath();
    const child = spawn(python, [shim, "--config", configPath], {
      stdio: ["pipe", "pipe", "pipe"],
    });
    const handle = new EngineHandle(child);
    return new Promise<EngineHandle>((resolve, reject) => {
      const onReady = (msg: WireResponse) => {
        if (msg.ok && msg.event === "ready") {
          handle.setIdle();
          resolve(handle);
        } else {
          handle.closed = true;
          reject(new EngineError(msg.error?.name ?? "EngineError",
            msg.error?.message ?? "engine failed to start"));
        }
      };
      handle.startup = onReady;
      child.on("error", (e) => reject(new EngineError("SpawnError", String(e))));
      child.on("exit", (code) => {
        if (handle.startup) {
          handle.startup = undefined;
          reject(new EngineError("ProcessExited", `engine exited during startup (code ${code})`));
        }
      });
    });
  }

  private startup?: (msg: WireResponse) => void;

  private onLine(line: string) {
    let msg: WireResponse;
    try {
      msg = JSON.parse(line) as WireResponse;
    } catch {
      return;
    }
    if (this.startup) {
      const cb = this.startup;
      this.startup = undefined;
      cb(msg);
      return;
    }
    if (msg.id == null) return;
    const waiter = this.pending.get(msg.id);
    if (!waiter) return;
    this.pending.delete(msg.id);
    if (msg.ok) waiter.resolve(msg.result);
    else waiter.reject(new EngineError(msg.error?.name ?? "EngineError",
      msg.error?.message ?? "engine error"));
  }

  /** Let the process exit with a live-but-idle handle; re-ref while calls are in flight. */
  private setIdle() {
    this.child.unref();
    for (const stream of [this.child.stdin, this.child.stdout, this.child.stderr]) {
      (stream as unknown as { unref?: () => void }).unref?.();
    }
  }

  private setBusy() {
    this.child.ref();
    for (const stream of [this.child.stdin, this.child.stdout, this.child.stderr]) {
      (stream as unknown as { ref?: () => void }).ref?.();
    }
  }

  private call(op: string, params: Record<string, unknown>): Promise<unknown> {
    const run = () => {
      if (this.closed) return Promise.reject(new ClosedHandleError());
      const id = this.nextId++;
      this.setBusy();
      return new Promise<unknown>((resolve, reject) => {
        this.pending.set(id, { resolve, reject });
        this.child.stdin.write(JSON.stringify({ id, op, ...params }) + "\n");
      }).finally(() => {
        if (this.pending.size === 0 && !this.exited) this.setIdle();
      });
    };
    // one in-flight call per handle
    const result = this.queue.then(run, run);
    this.queue = result.catch(() => undefined);
    return result;
  }

  generate(
    requestId: string,
    tokens: number[],
    maxNewTokens?: number,
    stopToken?: number,
  ): Promise<GenerateResult> {
    return this.call("generate", {
      request_id: requestId,
      tokens,
      max_new_tokens: maxNewTokens ?? null,
      stop_token: stopToken ?? null,
    }) as Promise<GenerateResult>;
  }

  prefill(requestId: string, tokens: number[]): Promise<RequestStats> {
    return this.call("prefill", { request_id: requestId, tokens }).then(
      (r) => (r as { stats: RequestStats }).stats,
    );
  }

  release(requestId: string): Promise<void> {
    return this.call("release", { request_id: requestId }).then(() => undefined);
  }

  /** Stop the engine process; subsequent calls raise ClosedHandleError. Idempotent. */
  async shutdown(): Promise<void> {
    if (this.closed) return;
    try {
      await this.call("shutdown", {});
    } catch {
      // process may already be gone
    }
    this.closed = true;
    this.child.stdin.end();
    if (!this.exited) {
      await new Promise<void>((resolve) => {
        const t = setTimeout(() => {
          this.child.kill();
          resolve();
        }, 2000);
        this.child.once("exit", () => {
          clearTimeout(t);
          resolve();
        });
      });
    }
  }

  get isClosed(): boolean {
    return this.closed;
  }
}

export function createEngine(configPath: string, options?: EngineOptions): Promise<EngineHandle> {
  return EngineHandle.create(configPath, options);
}
