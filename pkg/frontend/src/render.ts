/**
 * Renderers for the explorer panels.
 *
 * Every figure on screen is the exact byte span from the service response
 * (JsonDoc.token); parsed values are used only for presentation decisions
 * such as the red low-headroom warning or the bandwidth-bound status word.
 * Elements carry data-path attributes naming the response field they show,
 * which is also what the fidelity tests key on.
 */

import { JsonDoc, Path } from "./jsonDoc";

/** Per-thread headroom (bytes) below which spills become likely. */
export const LOW_HEADROOM_BYTES = 32;

function el(
  tag: string,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElement {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  node.append(...children);
  return node;
}

function pathAttr(path: Path): string {
  return path.join(".");
}

/** A span showing the service's bytes for the value at `path`. */
function tok(doc: JsonDoc, path: Path, cls = "value"): HTMLElement {
  return el("span", { class: cls, "data-path": pathAttr(path) }, doc.token(path));
}

/** A span showing a decoded string field. */
function txt(doc: JsonDoc, path: Path, cls = "value"): HTMLElement {
  return el("span", { class: cls, "data-path": pathAttr(path) }, doc.text(path));
}

function section(title: string, cls: string, ...children: (Node | string)[]): HTMLElement {
  return el("section", { class: cls }, el("h2", {}, title), ...children);
}

// ---------------------------------------------------------------------------
// panels

function paramsStrip(doc: JsonDoc): HTMLElement {
  const items = doc.keys(["params"]).map((key) =>
    el("span", { class: "param" }, `${key} = `, tok(doc, ["params", key])),
  );
  return section("Resolved parameters", "params", ...items);
}

function variableTable(doc: JsonDoc): HTMLElement {
  const head = el(
    "tr",
    {},
    ...["Var", "Description", "Size", "Q.", "Level", "M_TB (B)", "M_WG (B)"].map(
      (h) => el("th", {}, h),
    ),
  );
  const rows: HTMLElement[] = [head];
  const count = doc.length(["variables"]);
  for (let i = 0; i < count; i += 1) {
    const base: Path = ["variables", i];
    const doubled = doc.get([...base, "async_doubled"]) === true;
    const tb = el("td", {}, tok(doc, [...base, "bytes_tb"]));
    if (doubled) tb.append(el("span", { class: "doubled" }, "*"));
    rows.push(
      el(
        "tr",
        {},
        el("td", {}, txt(doc, [...base, "symbol"])),
        el("td", {}, txt(doc, [...base, "description"])),
        el("td", {}, txt(doc, [...base, "shape"])),
        el("td", {}, txt(doc, [...base, "quant_name"])),
        el("td", {}, txt(doc, [...base, "level"])),
        tb,
        el("td", {}, tok(doc, [...base, "bytes_wg"])),
      ),
    );
  }
  return section(
    "Variables",
    "variables",
    el("p", { class: "note" }, "* async loads are double-buffered"),
    el("table", {}, ...rows),
  );
}

/** Budgets, N_max, and leftover capacity for one config table. */
function budgetPanel(doc: JsonDoc, root: string, title: string): HTMLElement {
  const feasible = doc.get([root, "feasible"]) === true;
  const badge = el(
    "span",
    { class: feasible ? "badge ok" : "badge bad" },
    el("span", { "data-path": pathAttr([root, "feasible"]) }, doc.token([root, "feasible"])),
  );
  const cards: HTMLElement[] = [];
  for (const level of doc.keys([root, "totals"])) {
    const perThread = doc.get([root, "excess", level, "per_thread"]);
    const low = typeof perThread === "number" && perThread < LOW_HEADROOM_BYTES;
    const dl = el(
      "dl",
      {},
      el("dt", {}, "capacity (B)"),
      el("dd", {}, tok(doc, [root, "totals", level, "m_max"])),
      el("dt", {}, "per threadblock (B)"),
      el("dd", {}, tok(doc, [root, "totals", level, "m_tb"])),
      el("dt", {}, "per warpgroup (B)"),
      el("dd", {}, tok(doc, [root, "totals", level, "m_wg"])),
      el("dt", {}, "N_max"),
      el("dd", {}, tok(doc, [root, "n_max", level, "real"]), " (floor ", tok(doc, [root, "n_max", level, "floor"]), ")"),
      el("dt", {}, "excess / threadblock (B)"),
      el("dd", {}, tok(doc, [root, "excess", level, "per_threadblock"])),
      el("dt", {}, "excess / warpgroup (B)"),
      el("dd", {}, tok(doc, [root, "excess", level, "per_warpgroup"])),
      el("dt", {}, "excess / thread (B)"),
      el("dd", {}, tok(doc, [root, "excess", level, "per_thread"])),
    );
    const card = el(
      "div",
      { class: low ? "level warn" : "level", "data-level": level },
      el("h3", {}, level),
      dl,
    );
    if (low) {
      card.append(
        el("p", { class: "warn-note" }, `under ${LOW_HEADROOM_BYTES} spare bytes per thread; spills likely`),
      );
    }
    cards.push(card);
  }
  const notes = el("ul", { class: "notes" });
  const noteCount = doc.length([root, "notes"]);
  for (let i = 0; i < noteCount; i += 1) {
    notes.append(el("li", {}, txt(doc, [root, "notes", i])));
  }
  return section(
    title,
    `budgets ${root}`,
    el("p", {}, "co-resident warpgroups N = ", tok(doc, [root, "n"]), " ", badge),
    el("div", { class: "levels" }, ...cards),
    notes,
  );
}

function costTable(doc: JsonDoc): HTMLElement {
  const head = el(
    "tr",
    {},
    ...["Block", "Pipeline", "Ops/thread", "Clk/thread"].map((h) => el("th", {}, h)),
  );
  const rows: HTMLElement[] = [head];
  const count = doc.length(["costs"]);
  for (let i = 0; i < count; i += 1) {
    const base: Path = ["costs", i];
    rows.push(
      el(
        "tr",
        {},
        el("td", {}, txt(doc, [...base, "column"])),
        el("td", {}, txt(doc, [...base, "pipeline"])),
        el("td", {}, tok(doc, [...base, "ops_per_thread"])),
        el("td", {}, tok(doc, [...base, "clk_per_thread"])),
      ),
    );
  }
  return section(
    "Clock costs",
    "costs",
    el("table", {}, ...rows),
    el(
      "p",
      {},
      "tensor-core lower bound: ",
      tok(doc, ["tensor_lower_bound"]),
      " clk; ideal throughput: ",
      tok(doc, ["ideal_throughput"]),
      " FLOP/s",
    ),
  );
}

function thresholdPanel(doc: JsonDoc): HTMLElement {
  const gq = doc.get(["params", "g_q"]);
  const threshold = doc.get(["bandwidth_threshold"]);
  const bound =
    typeof gq === "number" && typeof threshold === "number" && gq < threshold
      ? "bandwidth-bound"
      : "compute-bound";
  return section(
    "Bandwidth threshold",
    "threshold",
    el(
      "p",
      {},
      "rows per tile g_q = ",
      tok(doc, ["params", "g_q"]),
      " vs threshold ",
      tok(doc, ["bandwidth_threshold"]),
      " — ",
      el("strong", { class: `regime ${bound}` }, bound),
    ),
  );
}

function utilizationPanel(doc: JsonDoc): HTMLElement {
  const fraction = doc.get(["utilization", "fraction"]);
  const pct = typeof fraction === "number" ? Math.min(100, fraction * 100) : 0;
  const meter = el(
    "div",
    { class: "meter" },
    el("div", { class: "meter-fill", style: `width: ${pct}%` }),
  );
  const idle = doc
    .keys(["utilization", "idle"])
    .map((unit) =>
      el("span", { class: "param" }, `${unit} idle = `, tok(doc, ["utilization", "idle", unit])),
    );
  return section(
    "Utilization",
    "utilization",
    el(
      "p",
      {},
      "tensor-core busy fraction ",
      tok(doc, ["utilization", "fraction"]),
      " (limited by ",
      txt(doc, ["utilization", "limiting"]),
      ")",
    ),
    meter,
    el(
      "p",
      {},
      "period ",
      tok(doc, ["utilization", "period"]),
      " clk vs ideal ",
      tok(doc, ["utilization", "ideal_period"]),
      " clk; rotation ",
      tok(doc, ["schedule", "rotation"]),
      " clk",
    ),
    ...idle,
  );
}

function ganttPanel(doc: JsonDoc): HTMLElement {
  return section(
    "Schedule",
    "gantt",
    el("pre", { "data-path": "gantt" }, doc.text(["gantt"])),
  );
}

/** Render a successful /api/plan response into `container`. */
export function renderReport(container: HTMLElement, doc: JsonDoc): void {
  container.replaceChildren(
    paramsStrip(doc),
    variableTable(doc),
    budgetPanel(doc, "config_table", "Memory budgets"),
    ...(doc.get(["held_scores_table"]) !== null
      ? [budgetPanel(doc, "held_scores_table", "Memory budgets holding next scores")]
      : []),
    costTable(doc),
    thresholdPanel(doc),
    utilizationPanel(doc),
    ganttPanel(doc),
  );
}

/** Render an error payload (validation, divisor, infeasible, I/O). */
export function renderError(container: HTMLElement, doc: JsonDoc): void {
  const flag = el(
    "div",
    { class: "error-flag" },
    el("p", { class: "error-kind" }, txt(doc, ["error", "kind"], "kind")),
    el("p", { class: "error-message" }, txt(doc, ["error", "message"], "message")),
  );
  if (doc.has(["error", "divisor"])) {
    const d: Path = ["error", "divisor"];
    const sources: (Node | string)[] = [];
    const n = doc.length([...d, "sources"]);
    for (let i = 0; i < n; i += 1) {
      if (i > 0) sources.push(", ");
      sources.push(tok(doc, [...d, "sources", i]));
    }
    flag.append(
      el(
        "p",
        { class: "divisor-detail" },
        "axis ",
        txt(doc, [...d, "axis"]),
        " needs a multiple of ",
        tok(doc, [...d, "required"]),
        ", got ",
        tok(doc, [...d, "actual"]),
        " (divisor sources: ",
        ...sources,
        ")",
      ),
    );
  }
  container.replaceChildren(flag);
}

// ---------------------------------------------------------------------------
// compare view

interface CompareRow {
  label: string;
  path: Path;
  kind: "token" | "text";
}

const COMPARE_ROWS: CompareRow[] = [
  { label: "feasible", path: ["config_table", "feasible"], kind: "token" },
  { label: "SMEM / warpgroup (B)", path: ["config_table", "totals", "SMEM", "m_wg"], kind: "token" },
  { label: "registers / warpgroup (B)", path: ["config_table", "totals", "registers", "m_wg"], kind: "token" },
  { label: "N_max (SMEM)", path: ["config_table", "n_max", "SMEM", "real"], kind: "token" },
  { label: "N_max (registers)", path: ["config_table", "n_max", "registers", "real"], kind: "token" },
  { label: "utilization fraction", path: ["utilization", "fraction"], kind: "token" },
  { label: "limited by", path: ["utilization", "limiting"], kind: "text" },
  { label: "period (clk)", path: ["utilization", "period"], kind: "token" },
  { label: "bandwidth threshold", path: ["bandwidth_threshold"], kind: "token" },
  { label: "ideal throughput (FLOP/s)", path: ["ideal_throughput"], kind: "token" },
];

function compareCell(doc: JsonDoc, row: CompareRow, side: string): HTMLElement {
  const cell = el("td", { "data-side": side });
  if (doc.has(["error"])) {
    if (row.label === "feasible") {
      cell.append(el("span", { class: "error-message" }, doc.text(["error", "message"])));
    } else {
      cell.append("—");
    }
    return cell;
  }
  if (!doc.has(row.path)) {
    cell.append("—");
    return cell;
  }
  cell.append(
    row.kind === "token" ? tok(doc, row.path) : txt(doc, row.path),
  );
  return cell;
}

/** Side-by-side totals, N_max, and utilization for two responses. */
export function renderCompare(container: HTMLElement, a: JsonDoc, b: JsonDoc): void {
  const head = el("tr", {}, el("th", {}, ""), el("th", {}, "A"), el("th", {}, "B"));
  const rows = COMPARE_ROWS.map((row) =>
    el(
      "tr",
      {},
      el("th", {}, row.label),
      compareCell(a, row, "a"),
      compareCell(b, row, "b"),
    ),
  );
  container.replaceChildren(
    section("Compare", "compare", el("table", {}, head, ...rows)),
  );
}
