// Websocket session: parses the state stream, tracks command acks and
// reconnects with exponential backoff when the server goes away.

import { Command, ServerMsg, StateMsg, parseServerMsg } from "./protocol.js";

export type ConnStatus = "connecting" | "open" | "closed";

export interface ConnectionHandlers {
  onState?: (s: StateMsg) => void;
  onStatus?: (status: ConnStatus, attempt: number) => void;
  onAck?: (id: string, latencyMs: number) => void;
  onErr?: (id: string | null, reason: string) => void;
}

export interface WsLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
}

export type WsFactory = (url: string) => WsLike;

const BACKOFF_BASE_MS = 500;
const BACKOFF_MAX_MS = 8000;

export class Connection {
  readonly url: string;
  private handlers: ConnectionHandlers;
  private factory: WsFactory;
  private ws: WsLike | null = null;
  private pending = new Map<string, number>();
  private nextId = 1;
  private attempt = 0;
  private closedByUser = false;
  private timer: ReturnType<typeof setTimeout> | null = null;
  status: ConnStatus = "closed";
  framesReceived = 0;

  constructor(url: string, handlers: ConnectionHandlers, factory?: WsFactory) {
    this.url = url;
    this.handlers = handlers;
    this.factory = factory ?? ((u) => new WebSocket(u) as unknown as WsLike);
  }

  connect(): void {
    this.closedByUser = false;
    this.open();
  }

  private open(): void {
    this.setStatus("connecting");
    let ws: WsLike;
    try {
      ws = this.factory(this.url);
    } catch {
      this.scheduleReconnect();
      return;
    }
    this.ws = ws;
    ws.onopen = () => {
      this.attempt = 0;
      this.setStatus("open");
    };
    ws.onclose = () => {
      this.ws = null;
      this.setStatus("closed");
      this.scheduleReconnect();
    };
    ws.onmessage = (ev) => {
      const msg = parseServerMsg(String(ev.data));
      if (!msg) return;
      this.dispatch(msg);
    };
  }

  private dispatch(msg: ServerMsg): void {
    if (msg.type === "state") {
      this.framesReceived++;
      this.handlers.onState?.(msg);
    } else if (msg.type === "ack") {
      if (msg.id && this.pending.has(msg.id)) {
        const t0 = this.pending.get(msg.id)!;
        this.pending.delete(msg.id);
        this.handlers.onAck?.(msg.id, Date.now() - t0);
      }
    } else {
      if (msg.id) this.pending.delete(msg.id);
      this.handlers.onErr?.(msg.id, msg.reason);
    }
  }

  private scheduleReconnect(): void {
    if (this.closedByUser || this.timer) return;
    const delay = Math.min(BACKOFF_MAX_MS, BACKOFF_BASE_MS * 2 ** this.attempt);
    this.attempt++;
    this.timer = setTimeout(() => {
      this.timer = null;
      if (!this.closedByUser) this.open();
    }, delay);
  }

  private setStatus(status: ConnStatus): void {
    this.status = status;
    this.handlers.onStatus?.(status, this.attempt);
  }

  /** Send a command; returns its id (acks arrive via onAck). */
  send(cmd: Command): string | null {
    if (!this.ws || this.status !== "open") return null;
    const id = cmd.id ?? `c${this.nextId++}`;
    this.pending.set(id, Date.now());
    this.ws.send(JSON.stringify({ ...cmd, id }));
    return id;
  }

  close(): void {
    this.closedByUser = true;
    if (this.timer) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    this.ws?.close();
    this.ws = null;
    this.setStatus("closed");
  }
}
