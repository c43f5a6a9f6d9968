/**
 * Raw-token access to a JSON document.
 *
 * The explorer never formats numbers itself: every displayed figure is the
 * exact byte span the service produced. This module parses a response once
 * with JSON.parse (for logic: conditionals, iteration) and in parallel
 * records the [start, end) span of every value in the raw text so the
 * renderer can show the server's bytes verbatim (e.g. "6.0" stays "6.0"
 * rather than becoming "6").
 */

export type Path = ReadonlyArray<string | number>;

interface SpanNode {
  start: number;
  end: number;
  object?: Map<string, SpanNode>;
  array?: SpanNode[];
}

class Scanner {
  private pos = 0;

  constructor(private readonly raw: string) {}

  scan(): SpanNode {
    const node = this.value();
    this.skipWs();
    return node;
  }

  private error(msg: string): never {
    throw new Error(`bad JSON at offset ${this.pos}: ${msg}`);
  }

  private skipWs(): void {
    while (this.pos < this.raw.length && " \t\n\r".includes(this.raw[this.pos])) {
      this.pos += 1;
    }
  }

  private value(): SpanNode {
    this.skipWs();
    const ch = this.raw[this.pos];
    if (ch === "{") return this.object();
    if (ch === "[") return this.array();
    if (ch === '"') {
      const start = this.pos;
      this.string();
      return { start, end: this.pos };
    }
    return this.scalar();
  }

  private object(): SpanNode {
    const start = this.pos;
    const entries = new Map<string, SpanNode>();
    this.pos += 1; // {
    this.skipWs();
    if (this.raw[this.pos] === "}") {
      this.pos += 1;
      return { start, end: this.pos, object: entries };
    }
    for (;;) {
      this.skipWs();
      if (this.raw[this.pos] !== '"') this.error("expected object key");
      const key = this.string();
      this.skipWs();
      if (this.raw[this.pos] !== ":") this.error("expected ':'");
      this.pos += 1;
      entries.set(key, this.value());
      this.skipWs();
      const ch = this.raw[this.pos];
      if (ch === ",") {
        this.pos += 1;
        continue;
      }
      if (ch === "}") {
        this.pos += 1;
        return { start, end: this.pos, object: entries };
      }
      this.error("expected ',' or '}'");
    }
  }

  private array(): SpanNode {
    const start = this.pos;
    const items: SpanNode[] = [];
    this.pos += 1; // [
    this.skipWs();
    if (this.raw[this.pos] === "]") {
      this.pos += 1;
      return { start, end: this.pos, array: items };
    }
    for (;;) {
      items.push(this.value());
      this.skipWs();
      const ch = this.raw[this.pos];
      if (ch === ",") {
        this.pos += 1;
        continue;
      }
      if (ch === "]") {
        this.pos += 1;
        return { start, end: this.pos, array: items };
      }
      this.error("expected ',' or ']'");
    }
  }

  /** Consume a string literal, returning its decoded value. */
  private string(): string {
    const start = this.pos;
    this.pos += 1; // opening quote
    while (this.pos < this.raw.length) {
      const ch = this.raw[this.pos];
      if (ch === "\\") {
        this.pos += 2; // escape: skip the introducer and the escaped char
        continue;
      }
      if (ch === '"') {
        this.pos += 1;
        return JSON.parse(this.raw.slice(start, this.pos)) as string;
      }
      this.pos += 1;
    }
    this.error("unterminated string");
  }

  /** Numbers, true, false, null: everything up to a delimiter. */
  private scalar(): SpanNode {
    const start = this.pos;
    while (
      this.pos < this.raw.length &&
      !",}] \t\n\r".includes(this.raw[this.pos])
    ) {
      this.pos += 1;
    }
    if (this.pos === start) this.error("expected a value");
    return { start, end: this.pos };
  }
}

export class JsonDoc {
  readonly raw: string;
  readonly body: unknown;
  private readonly root: SpanNode;

  constructor(raw: string) {
    this.raw = raw;
    this.body = JSON.parse(raw);
    this.root = new Scanner(raw).scan();
  }

  private node(path: Path): SpanNode {
    let cur = this.root;
    for (const step of path) {
      if (typeof step === "number") {
        const next = cur.array?.[step];
        if (!next) throw new Error(`no array index ${step} under ${path.join(".")}`);
        cur = next;
      } else {
        const next = cur.object?.get(step);
        if (!next) throw new Error(`no key ${step!} under ${path.join(".")}`);
        cur = next;
      }
    }
    return cur;
  }

  /** Exact bytes of the value at `path` as the service wrote them. */
  token(path: Path): string {
    const n = this.node(path);
    return this.raw.slice(n.start, n.end);
  }

  /** Parsed value at `path` (for conditionals, never for display). */
  get(path: Path): unknown {
    let cur: unknown = this.body;
    for (const step of path) {
      if (cur === null || typeof cur !== "object") {
        throw new Error(`no value at ${path.join(".")}`);
      }
      cur = (cur as Record<string | number, unknown>)[step];
    }
    return cur;
  }

  /** String value at `path`, decoded (no surrounding quotes). */
  text(path: Path): string {
    const v = this.get(path);
    if (typeof v !== "string") {
      throw new Error(`value at ${path.join(".")} is not a string`);
    }
    return v;
  }

  has(path: Path): boolean {
    try {
      this.node(path);
      return true;
    } catch {
      return false;
    }
  }

  /** Number of elements of the array at `path`. */
  length(path: Path): number {
    const n = this.node(path);
    if (!n.array) throw new Error(`value at ${path.join(".")} is not an array`);
    return n.array.length;
  }

  /** Keys of the object at `path`, in document order. */
  keys(path: Path): string[] {
    const n = this.node(path);
    if (!n.object) throw new Error(`value at ${path.join(".")} is not an object`);
    return [...n.object.keys()];
  }
}
