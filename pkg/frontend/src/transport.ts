/** Transports to the session server.
 *
 * Browsers connect over WebSocket (same JSON schema, one message per text
 * frame).  The native protocol (big-endian u32 length-prefixed JSON over a
 * raw socket) is implemented as a pure codec so node-side tests can script a
 * session through the exact code path the UI uses.
 */

import { InboundMsg, OutboundMsg, parseInbound, validateOutbound } from "./schema.js";

/** Incremental decoder/encoder for the length-prefixed native protocol. */
export class NativeCodec {
  private pending: Uint8Array = new Uint8Array(0);

  encode(msg: OutboundMsg): Uint8Array {
    validateOutbound(msg);
    const body = new TextEncoder().encode(JSON.stringify(msg));
    const out = new Uint8Array(4 + body.length);
    new DataView(out.buffer).setUint32(0, body.length, false);
    out.set(body, 4);
    return out;
  }

  /** Feed a chunk; returns every complete message it finishes. */
  feed(chunk: Uint8Array): InboundMsg[] {
    const merged = new Uint8Array(this.pending.length + chunk.length);
    merged.set(this.pending, 0);
    merged.set(chunk, this.pending.length);
    this.pending = merged;
    const out: InboundMsg[] = [];
    for (;;) {
      if (this.pending.length < 4) break;
      const view = new DataView(this.pending.buffer, this.pending.byteOffset);
      const length = view.getUint32(0, false);
      if (this.pending.length < 4 + length) break;
      const body = this.pending.slice(4, 4 + length);
      this.pending = this.pending.slice(4 + length);
      out.push(parseInbound(new TextDecoder().decode(body)));
    }
    return out;
  }
}

export type ConnectionStatus = "connecting" | "open" | "closed";

export interface TransportEvents {
  onMessage: (msg: InboundMsg) => void;
  onStatus: (status: ConnectionStatus) => void;
}

/** WebSocket client with exponential-backoff reconnect. */
export class WsTransport {
  private ws: WebSocket | null = null;
  private backoffMs = 500;
  private closed = false;

  constructor(
    private url: string,
    private events: TransportEvents,
    private wsFactory: (url: string) => WebSocket = (u) => new WebSocket(u),
  ) {}

  connect(): void {
    this.closed = false;
    this.events.onStatus("connecting");
    const ws = this.wsFactory(this.url);
    this.ws = ws;
    ws.onopen = () => {
      this.backoffMs = 500;
      this.events.onStatus("open");
    };
    ws.onmessage = (ev: MessageEvent) => {
      try {
        this.events.onMessage(parseInbound(String(ev.data)));
      } catch {
        // malformed frames are dropped; the server also replies with errors
      }
    };
    ws.onclose = () => {
      this.events.onStatus("closed");
      if (!this.closed) {
        setTimeout(() => this.connect(), this.backoffMs);
        this.backoffMs = Math.min(this.backoffMs * 2, 10_000);
      }
    };
    ws.onerror = () => {
      ws.close();
    };
  }

  send(msg: OutboundMsg): boolean {
    if (!this.ws || this.ws.readyState !== 1) return false;
    this.ws.send(JSON.stringify(validateOutbound(msg)));
    return true;
  }

  close(): void {
    this.closed = true;
    this.ws?.close();
  }
}
