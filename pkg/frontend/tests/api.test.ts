import { afterEach, describe, expect, it, vi } from "vitest";

import {
  EndpointClient,
  getJson,
  type ApiResult,
  type FetchLike,
} from "../src/api";

interface Call {
  url: string;
  method: string;
  body: unknown;
  signal: AbortSignal | null;
  resolve(status: number, raw: string): void;
  reject(err: unknown): void;
}

/** A fetch stand-in whose responses the test resolves by hand. */
function mockFetch(opts: { rejectOnAbort?: boolean } = {}): {
  fetchFn: FetchLike;
  calls: Call[];
} {
  const rejectOnAbort = opts.rejectOnAbort ?? true;
  const calls: Call[] = [];
  const fetchFn: FetchLike = (url, init) =>
    new Promise((resolve, reject) => {
      const signal = init?.signal ?? null;
      if (signal && rejectOnAbort) {
        signal.addEventListener("abort", () =>
          reject(new DOMException("The operation was aborted.", "AbortError")),
        );
      }
      calls.push({
        url,
        method: init?.method ?? "GET",
        body: typeof init?.body === "string" ? JSON.parse(init.body) : null,
        signal,
        resolve: (status, raw) =>
          resolve({ status, text: () => Promise.resolve(raw) }),
        reject,
      });
    });
  return { fetchFn, calls };
}

const settle = (): Promise<void> =>
  new Promise((resolve) => setTimeout(resolve, 0));

function collector(): { results: ApiResult[]; errors: unknown[]; onResult: (r: ApiResult) => void; onError: (e: unknown) => void } {
  const results: ApiResult[] = [];
  const errors: unknown[] = [];
  return {
    results,
    errors,
    onResult: (r) => results.push(r),
    onError: (e) => errors.push(e),
  };
}

afterEach(() => {
  vi.useRealTimers();
});

describe("debounce", () => {
  it("coalesces rapid edits into one request carrying the latest body", () => {
    vi.useFakeTimers();
    const { fetchFn, calls } = mockFetch();
    const client = new EndpointClient("api/plan", 250, fetchFn);
    const sink = collector();

    client.request({ d: 64 }, sink.onResult, sink.onError);
    vi.advanceTimersByTime(200);
    client.request({ d: 128 }, sink.onResult, sink.onError);

    expect(calls).toHaveLength(0);
    vi.advanceTimersByTime(249);
    expect(calls).toHaveLength(0);
    vi.advanceTimersByTime(1);
    expect(calls).toHaveLength(1);
    expect(calls[0].method).toBe("POST");
    expect(calls[0].url).toBe("api/plan");
    expect(calls[0].body).toEqual({ d: 128 });
  });

  it("flush() fires the pending request immediately, exactly once", () => {
    vi.useFakeTimers();
    const { fetchFn, calls } = mockFetch();
    const client = new EndpointClient("api/plan", 250, fetchFn);
    const sink = collector();

    client.request({ d: 64 }, sink.onResult, sink.onError);
    client.flush();
    expect(calls).toHaveLength(1);

    vi.advanceTimersByTime(1000); // the debounce timer must have been cleared
    client.flush(); // and nothing is pending any more
    expect(calls).toHaveLength(1);
  });
});

describe("latest-wins", () => {
  it("aborts the in-flight request when a newer one fires", async () => {
    const { fetchFn, calls } = mockFetch();
    const client = new EndpointClient("api/plan", 0, fetchFn);
    const first = collector();
    const second = collector();

    client.request({ d: 64 }, first.onResult, first.onError);
    client.flush();
    client.request({ d: 128 }, second.onResult, second.onError);
    client.flush();

    expect(calls).toHaveLength(2);
    expect(calls[0].signal!.aborted).toBe(true);
    expect(calls[1].signal!.aborted).toBe(false);

    calls[1].resolve(200, '{"d": 128}');
    await settle();

    expect(first.results).toHaveLength(0);
    expect(first.errors).toHaveLength(0); // abort is silent, not an error
    expect(second.results).toHaveLength(1);
    expect(second.results[0].status).toBe(200);
    expect(second.results[0].doc.get(["d"])).toBe(128);
  });

  it("drops a stale response even if its fetch was never rejected", async () => {
    const { fetchFn, calls } = mockFetch({ rejectOnAbort: false });
    const client = new EndpointClient("api/plan", 0, fetchFn);
    const first = collector();
    const second = collector();

    client.request({ d: 64 }, first.onResult, first.onError);
    client.flush();
    client.request({ d: 128 }, second.onResult, second.onError);
    client.flush();

    calls[1].resolve(200, '{"d": 128}');
    await settle();
    calls[0].resolve(200, '{"d": 64}'); // arrives late
    await settle();

    expect(first.results).toHaveLength(0);
    expect(first.errors).toHaveLength(0);
    expect(second.results.map((r) => r.doc.get(["d"]))).toEqual([128]);
  });
});

describe("delivery", () => {
  it("hands back status and the exact response bytes", async () => {
    const { fetchFn, calls } = mockFetch();
    const client = new EndpointClient("api/plan", 0, fetchFn);
    const sink = collector();

    client.request({ d: 64 }, sink.onResult, sink.onError);
    client.flush();
    calls[0].resolve(400, '{"error": {"period": 6.0}}');
    await settle();

    expect(sink.results).toHaveLength(1);
    expect(sink.results[0].status).toBe(400);
    expect(sink.results[0].doc.token(["error", "period"])).toBe("6.0");
  });

  it("reports non-abort failures through onError", async () => {
    const { fetchFn, calls } = mockFetch();
    const client = new EndpointClient("api/plan", 0, fetchFn);
    const sink = collector();

    client.request({ d: 64 }, sink.onResult, sink.onError);
    client.flush();
    const boom = new TypeError("NetworkError when attempting to fetch resource");
    calls[0].reject(boom);
    await settle();

    expect(sink.results).toHaveLength(0);
    expect(sink.errors).toEqual([boom]);
  });
});

describe("getJson", () => {
  it("fetches once and exposes the document", async () => {
    const { fetchFn, calls } = mockFetch();
    const pending = getJson("api/catalogs", fetchFn);
    expect(calls).toHaveLength(1);
    expect(calls[0].method).toBe("GET");
    calls[0].resolve(200, '{"diagrams": ["attention", "gqa"]}');

    const result = await pending;
    expect(result.status).toBe(200);
    expect(result.doc.get(["diagrams", 1])).toBe("gqa");
  });
});
