import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    testTimeout: 120_000,
    hookTimeout: 120_000,
    // engine processes are real subprocesses; keep files sequential
    fileParallelism: false,
  },
});
