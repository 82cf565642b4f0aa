import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node", // e2e.test.ts opts into jsdom via its docblock
    include: ["tests/**/*.test.ts"],
  },
});
