/** Test workspace: materialize engine artifacts and configs via the Python side. */

import { execFileSync } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import path from "node:path";

export const PYTHON = process.env.SLOTSERVE_PYTHON ?? "python3";

export interface Workspace {
  dir: string;
  basePath: string;
  draftPath: string;
  config(name: string, overrides?: Record<string, unknown>): string;
}

export function makeWorkspace(): Workspace {
  const dir = mkdtempSync(path.join(tmpdir(), "slotserve-ts-"));
  const script = `
import json, os, sys
from slotserve import REFERENCE_ARCH, draft_arch_for
from slotserve.generator import generate_artifact_file
d = sys.argv[1]
generate_artifact_file(os.path.join(d, "base.efmt"), seed=21)
generate_artifact_file(os.path.join(d, "draft.efmt"), seed=22, arch=draft_arch_for(REFERENCE_ARCH))
print("ok")
`;
  execFileSync(PYTHON, ["-c", script, dir]);
  const basePath = path.join(dir, "base.efmt");
  const draftPath = path.join(dir, "draft.efmt");
  return {
    dir,
    basePath,
    draftPath,
    config(name, overrides = {}) {
      const doc: Record<string, unknown> = {
        prefill_artifact_path: basePath,
        slots: [{ request_id: "a", prefix_tokens: [], max_new_tokens: 96 }],
        ...overrides,
      };
      const p = path.join(dir, `${name}.json`);
      writeFileSync(p, JSON.stringify(doc));
      return p;
    },
  };
}

export function cliRun(
  configPath: string,
  requestId: string,
  tokens: number[],
  maxNewTokens: number,
  stopToken?: number,
): { output_tokens: number[]; stats: Record<string, unknown> } {
  const args = [
    "-m", "slotserve.cli", "run",
    "--config", configPath,
    "--request-id", requestId,
    "--tokens", tokens.join(","),
    "--max-new-tokens", String(maxNewTokens),
  ];
  if (stopToken !== undefined) args.push("--stop-token", String(stopToken));
  const out = execFileSync(PYTHON, args, { encoding: "utf-8" });
  return JSON.parse(out);
}
