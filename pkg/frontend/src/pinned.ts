/**
 * Pinned explorer states used by the fidelity tests and the fixture
 * capture script. Each state has a committed fixture holding the exact
 * bytes the service returned for its request body.
 */

import type { ExplorerState } from "./state";

export interface PinnedCase {
  /** Fixture file stem under tests/fixtures/. */
  name: string;
  state: ExplorerState;
  /** Expected HTTP status of the /api/plan response. */
  status: number;
}

export const PINNED_CASES: PinnedCase[] = [
  {
    name: "plan-defaults",
    state: {
      diagram: "attention",
      catalog: "h100_sxm5_like",
      preset: "defaults",
      config: {},
      n: null,
      strategy: "three-warpgroup",
      overheads: {},
    },
    status: 200,
  },
  {
    name: "plan-fp16-intra",
    state: {
      diagram: "attention",
      catalog: "h100_sxm5_like",
      preset: "fp16-large-tile",
      config: {},
      n: null,
      strategy: "intra-warpgroup",
      overheads: { sfu: 0.66 },
    },
    status: 200,
  },
  {
    name: "plan-divisor-d100",
    state: {
      diagram: "attention",
      catalog: "h100_sxm5_like",
      preset: "defaults",
      config: { d: 100 },
      n: null,
      strategy: "three-warpgroup",
      overheads: {},
    },
    status: 400,
  },
];
