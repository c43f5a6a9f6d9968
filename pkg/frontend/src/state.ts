/**
 * ExplorerState: everything the user can adjust, fully serializable to the
 * URL query string so any what-if configuration is a shareable link.
 *
 * The state also carries the last response per endpoint at runtime; those
 * are deliberately not part of the URL — reloading a shared link re-issues
 * the same requests against the stateless service, which reproduces the
 * identical bytes.
 */

export const NUMERIC_CONFIG_KEYS = [
  "d",
  "d1",
  "d2",
  "n_wg",
  "s_x",
  "u_x",
  "w_q",
  "x_chunks",
  "quant_q",
  "quant_k",
  "quant_v",
  "quant_p",
] as const;

export const TEXT_CONFIG_KEYS = ["pipeline_qk", "pipeline_pv"] as const;

export const CONFIG_KEYS: readonly string[] = [
  ...NUMERIC_CONFIG_KEYS,
  ...TEXT_CONFIG_KEYS,
];

export const STRATEGIES = [
  "three-warpgroup",
  "inter-warpgroup",
  "intra-warpgroup",
] as const;

export const PRESETS = ["defaults", "fp16-large-tile", "fp8-large-tile"] as const;

export interface ExplorerState {
  diagram: string;
  catalog: string;
  preset: string;
  /** Per-key overrides on top of the preset (sizes, quantizations, pipelines). */
  config: Record<string, number | string>;
  /** Co-resident warpgroups; null lets the service use its capacity bound. */
  n: number | null;
  strategy: string;
  /** Per-pipeline overhead fractions; empty means the service's defaults. */
  overheads: Record<string, number>;
  /** Last response per endpoint (runtime only, never serialized). */
  responses?: Record<string, unknown>;
}

export function defaultState(): ExplorerState {
  return {
    diagram: "attention",
    catalog: "h100_sxm5_like",
    preset: "defaults",
    config: {},
    n: null,
    strategy: "three-warpgroup",
    overheads: {},
  };
}

const OVERHEAD_PREFIX = "oh.";

/** Serialize one state into URLSearchParams under an optional key prefix. */
function write(params: URLSearchParams, s: ExplorerState, prefix: string): void {
  params.set(prefix + "diagram", s.diagram);
  params.set(prefix + "catalog", s.catalog);
  params.set(prefix + "preset", s.preset);
  for (const key of Object.keys(s.config).sort()) {
    params.set(prefix + key, String(s.config[key]));
  }
  if (s.n !== null) params.set(prefix + "n", String(s.n));
  params.set(prefix + "strategy", s.strategy);
  for (const unit of Object.keys(s.overheads).sort()) {
    params.set(prefix + OVERHEAD_PREFIX + unit, String(s.overheads[unit]));
  }
}

function read(params: URLSearchParams, prefix: string): ExplorerState {
  const s = defaultState();
  const config: Record<string, number | string> = {};
  const overheads: Record<string, number> = {};
  for (const [rawKey, value] of params.entries()) {
    if (!rawKey.startsWith(prefix)) continue;
    const key = rawKey.slice(prefix.length);
    // a "b." pair under the empty prefix belongs to the compare state
    if (prefix === "" && key.startsWith("b.")) continue;
    if (key === "diagram") s.diagram = value;
    else if (key === "catalog") s.catalog = value;
    else if (key === "preset") s.preset = value;
    else if (key === "n") s.n = Number(value);
    else if (key === "strategy") s.strategy = value;
    else if (key.startsWith(OVERHEAD_PREFIX)) {
      overheads[key.slice(OVERHEAD_PREFIX.length)] = Number(value);
    } else if ((NUMERIC_CONFIG_KEYS as readonly string[]).includes(key)) {
      config[key] = Number(value);
    } else if ((TEXT_CONFIG_KEYS as readonly string[]).includes(key)) {
      config[key] = value;
    }
  }
  s.config = config;
  s.overheads = overheads;
  return s;
}

/** The state (plus an optional compare state under "b.") as a query string. */
export function toQuery(a: ExplorerState, b?: ExplorerState | null): string {
  const params = new URLSearchParams();
  write(params, a, "");
  if (b) write(params, b, "b.");
  return params.toString();
}

export function fromQuery(query: string): {
  a: ExplorerState;
  b: ExplorerState | null;
} {
  const params = new URLSearchParams(query);
  const a = read(params, "");
  const hasB = [...params.keys()].some((k) => k.startsWith("b."));
  return { a, b: hasB ? read(params, "b.") : null };
}

/** The /api/plan request body for a state. Omitted keys use service defaults. */
export function toRequest(s: ExplorerState): Record<string, unknown> {
  const body: Record<string, unknown> = {
    diagram: s.diagram,
    catalog: s.catalog,
    config: { preset: s.preset, ...s.config },
    strategy: s.strategy,
  };
  if (Object.keys(s.overheads).length > 0) body.overheads = s.overheads;
  if (s.n !== null) body.n = s.n;
  return body;
}
