/// <reference types="vitest/config" />
import { defineConfig } from "vite";

export default defineConfig({
  // relative asset paths so the bundle works from any mount point
  base: "./",
  build: {
    outDir: "dist",
    emptyOutDir: true,
  },
  server: {
    proxy: {
      "/api": "http://127.0.0.1:8000",
    },
  },
  test: {
    environment: "jsdom",
    include: ["tests/**/*.test.ts"],
  },
});
