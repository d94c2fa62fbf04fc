// Render client with debouncing and latest-wins response ordering.
//
// Monotone request ids guarantee no stale frame is ever shown: a response is
// applied only if its id is newer than the newest applied so far. At most one
// request is in flight; superseded in-flight requests are aborted.

import type { Meta, RenderRequest, RenderResponse, ErrorResponse } from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface ClientEvents {
  onFrame: (resp: RenderResponse, id: number) => void;
  onError: (message: string, id: number) => void;
}

export class RenderClient {
  private nextId = 1;
  private appliedId = 0;
  private inflight: AbortController | null = null;
  private pending: RenderRequest | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private baseUrl: string,
    private events: ClientEvents,
    private fetchImpl: FetchLike = fetch.bind(globalThis),
    private debounceMs = 150,
  ) {}

  async fetchMeta(): Promise<Meta> {
    const resp = await this.fetchImpl(`${this.baseUrl}/meta`);
    if (!resp.ok) throw new Error(`meta failed: ${resp.status}`);
    return (await resp.json()) as Meta;
  }

  /** Debounced render: coalesces rapid pose/query changes. */
  request(req: RenderRequest): void {
    this.pending = req;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      if (this.pending) void this.send(this.pending);
      this.pending = null;
    }, this.debounceMs);
  }

  /** Immediate render (used by tests and the first paint). */
  async send(req: RenderRequest): Promise<void> {
    const id = this.nextId++;
    if (this.inflight) this.inflight.abort();
    const controller = new AbortController();
    this.inflight = controller;
    try {
      const resp = await this.fetchImpl(`${this.baseUrl}/render`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(req),
        signal: controller.signal,
      });
      const body = await resp.json();
      if (id <= this.appliedId) return; // a newer response already landed
      if (!resp.ok) {
        this.appliedId = id;
        const err = body as ErrorResponse;
        this.events.onError(err.message ?? err.error ?? `HTTP error`, id);
        return;
      }
      this.appliedId = id;
      this.events.onFrame(body as RenderResponse, id);
    } catch (e) {
      if ((e as Error).name === "AbortError") return; // superseded
      if (id <= this.appliedId) return;
      this.appliedId = id;
      this.events.onError((e as Error).message, id);
    } finally {
      if (this.inflight === controller) this.inflight = null;
    }
  }

  lastAppliedId(): number {
    return this.appliedId;
  }
}
