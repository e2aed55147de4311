import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    include: ["tests/**/*.test.ts"],
    testTimeout: 180_000,
    hookTimeout: 180_000,
    // the e2e suite drives one shared daemon; parallel files would race on ports
    fileParallelism: false,
  },
});
