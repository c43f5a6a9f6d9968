import { readFileSync } from "node:fs";
import { resolve } from "node:path";

import { JsonDoc, Path } from "../src/jsonDoc";

// vitest runs with the package root as cwd; import.meta.url is rewritten
// by the jsdom environment, so resolve fixtures relative to the cwd instead
const FIXTURE_DIR = resolve(process.cwd(), "tests", "fixtures");

export function fixtureRaw(name: string): string {
  return readFileSync(resolve(FIXTURE_DIR, `${name}.json`), "utf8");
}

export function fixtureDoc(name: string): JsonDoc {
  return new JsonDoc(fixtureRaw(name));
}

export function fixtureRequest(name: string): unknown {
  return JSON.parse(
    readFileSync(resolve(FIXTURE_DIR, `${name}.request.json`), "utf8"),
  );
}

export function parsePath(joined: string): Path {
  return joined.split(".").map((seg) => (/^\d+$/.test(seg) ? Number(seg) : seg));
}

/** Text content of the element displaying `path`, which must exist. */
export function textAt(container: HTMLElement, path: string): string {
  const node = container.querySelector(`[data-path="${path}"]`);
  if (!node) throw new Error(`no element for path ${path}`);
  return node.textContent ?? "";
}
