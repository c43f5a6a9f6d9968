/**
 * Browser wiring: form <-> ExplorerState <-> URL <-> /api/plan.
 *
 * The form edits one live state; "pin for compare" freezes a copy whose
 * panels render side by side with the live one. Both states live in the
 * URL, so any view — including a comparison — is a shareable link.
 */

import { EndpointClient, getJson, ApiResult } from "./api";
import {
  ExplorerState,
  NUMERIC_CONFIG_KEYS,
  TEXT_CONFIG_KEYS,
  PRESETS,
  STRATEGIES,
  defaultState,
  fromQuery,
  toQuery,
  toRequest,
} from "./state";
import { renderCompare, renderError, renderReport } from "./render";

const OVERHEAD_UNITS = ["sfu", "fp16"] as const;

function byId<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function fillSelect(select: HTMLSelectElement, options: readonly string[], value: string): void {
  select.replaceChildren(
    ...options.map((name) => {
      const o = document.createElement("option");
      o.value = name;
      o.textContent = name;
      return o;
    }),
  );
  select.value = value;
}

function stateFromForm(): ExplorerState {
  const s = defaultState();
  s.diagram = byId<HTMLSelectElement>("diagram").value;
  s.catalog = byId<HTMLSelectElement>("catalog").value;
  s.preset = byId<HTMLSelectElement>("preset").value;
  s.strategy = byId<HTMLSelectElement>("strategy").value;
  for (const key of NUMERIC_CONFIG_KEYS) {
    const raw = byId<HTMLInputElement>(`cfg-${key}`).value.trim();
    if (raw !== "") s.config[key] = Number(raw);
  }
  for (const key of TEXT_CONFIG_KEYS) {
    const raw = byId<HTMLInputElement>(`cfg-${key}`).value.trim();
    if (raw !== "") s.config[key] = raw;
  }
  const n = byId<HTMLInputElement>("wgs").value.trim();
  s.n = n === "" ? null : Number(n);
  for (const unit of OVERHEAD_UNITS) {
    const raw = byId<HTMLInputElement>(`oh-${unit}`).value.trim();
    if (raw !== "") s.overheads[unit] = Number(raw);
  }
  return s;
}

function formFromState(s: ExplorerState): void {
  byId<HTMLSelectElement>("diagram").value = s.diagram;
  byId<HTMLSelectElement>("catalog").value = s.catalog;
  byId<HTMLSelectElement>("preset").value = s.preset;
  byId<HTMLSelectElement>("strategy").value = s.strategy;
  for (const key of [...NUMERIC_CONFIG_KEYS, ...TEXT_CONFIG_KEYS]) {
    byId<HTMLInputElement>(`cfg-${key}`).value =
      key in s.config ? String(s.config[key]) : "";
  }
  byId<HTMLInputElement>("wgs").value = s.n === null ? "" : String(s.n);
  for (const unit of OVERHEAD_UNITS) {
    byId<HTMLInputElement>(`oh-${unit}`).value =
      unit in s.overheads ? String(s.overheads[unit]) : "";
  }
}

async function start(): Promise<void> {
  const planClient = new EndpointClient("api/plan");
  const pinnedClient = new EndpointClient("api/plan", 0);
  const report = byId<HTMLElement>("report");
  const compareBox = byId<HTMLElement>("compare-box");

  let live: ApiResult | null = null;
  let pinnedResult: ApiResult | null = null;
  let pinned: ExplorerState | null = null;

  const parsed = fromQuery(window.location.search.replace(/^\?/, ""));
  pinned = parsed.b;

  try {
    const cats = await getJson("api/catalogs");
    const names = (cats.doc.get(["catalogs"]) as { name: string }[]).map((c) => c.name);
    const diagrams = cats.doc.get(["diagrams"]) as string[];
    fillSelect(byId("catalog"), names, parsed.a.catalog);
    fillSelect(byId("diagram"), diagrams, parsed.a.diagram);
  } catch {
    fillSelect(byId("catalog"), [parsed.a.catalog], parsed.a.catalog);
    fillSelect(byId("diagram"), [parsed.a.diagram], parsed.a.diagram);
  }
  fillSelect(byId("preset"), PRESETS, parsed.a.preset);
  fillSelect(byId("strategy"), STRATEGIES, parsed.a.strategy);
  formFromState(parsed.a);

  const renderAll = (): void => {
    if (!live) return;
    if (live.doc.has(["error"])) renderError(report, live.doc);
    else renderReport(report, live.doc);
    if (pinnedResult && live) {
      renderCompare(compareBox, pinnedResult.doc, live.doc);
      compareBox.hidden = false;
    } else {
      compareBox.hidden = true;
    }
  };

  const refresh = (): void => {
    const s = stateFromForm();
    window.history.replaceState(null, "", `?${toQuery(s, pinned)}`);
    planClient.request(
      toRequest(s),
      (r) => {
        live = r;
        renderAll();
      },
      (err) => {
        report.replaceChildren();
        const p = document.createElement("p");
        p.className = "error-message";
        p.textContent = `service unreachable: ${String(err)}`;
        report.append(p);
      },
    );
  };

  const refreshPinned = (): void => {
    if (!pinned) {
      pinnedResult = null;
      renderAll();
      return;
    }
    pinnedClient.request(toRequest(pinned), (r) => {
      pinnedResult = r;
      renderAll();
    });
    pinnedClient.flush();
  };

  byId<HTMLButtonElement>("pin").addEventListener("click", () => {
    pinned = stateFromForm();
    window.history.replaceState(null, "", `?${toQuery(pinned, pinned)}`);
    refreshPinned();
  });
  byId<HTMLButtonElement>("unpin").addEventListener("click", () => {
    pinned = null;
    refreshPinned();
    refresh();
  });

  for (const node of document.querySelectorAll("#form input, #form select")) {
    node.addEventListener("input", refresh);
  }

  refresh();
  planClient.flush();
  refreshPinned();
}

void start();
