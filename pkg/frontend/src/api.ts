/**
 * Debounced, latest-wins access to the service endpoints.
 *
 * Each endpoint keeps at most one in-flight request: firing a new one
 * aborts the previous fetch, and a response is delivered only if it is
 * still the newest request for that endpoint. Input is debounced so the
 * stateless service is hit once the user settles, not on every keystroke.
 */

import { JsonDoc } from "./jsonDoc";

export interface ApiResult {
  status: number;
  doc: JsonDoc;
}

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<{ status: number; text(): Promise<string> }>;

export class EndpointClient {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private controller: AbortController | null = null;
  private seq = 0;
  private pending: (() => void) | null = null;

  constructor(
    private readonly url: string,
    private readonly debounceMs = 250,
    private readonly fetchFn: FetchLike = (u, i) => fetch(u, i),
  ) {}

  /** Schedule a POST of `body`; earlier pending/in-flight requests lose. */
  request(
    body: unknown,
    onResult: (r: ApiResult) => void,
    onError: (err: unknown) => void = () => {},
  ): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.pending = () => void this.fire(body, onResult, onError);
    this.timer = setTimeout(() => this.flush(), this.debounceMs);
  }

  /** Run the pending request immediately (initial page load, tests). */
  flush(): void {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    const fire = this.pending;
    this.pending = null;
    if (fire) fire();
  }

  private async fire(
    body: unknown,
    onResult: (r: ApiResult) => void,
    onError: (err: unknown) => void,
  ): Promise<void> {
    this.controller?.abort();
    const controller = new AbortController();
    this.controller = controller;
    const mySeq = ++this.seq;
    try {
      const resp = await this.fetchFn(this.url, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
        signal: controller.signal,
      });
      const raw = await resp.text();
      if (mySeq !== this.seq) return; // a newer request won
      onResult({ status: resp.status, doc: new JsonDoc(raw) });
    } catch (err) {
      if (controller.signal.aborted || mySeq !== this.seq) return;
      onError(err);
    }
  }
}

/** One-shot GET returning the raw document (catalog/diagram listing). */
export async function getJson(
  url: string,
  fetchFn: FetchLike = (u, i) => fetch(u, i),
): Promise<ApiResult> {
  const resp = await fetchFn(url);
  return { status: resp.status, doc: new JsonDoc(await resp.text()) };
}
