import { SparkBuffer } from "./sparkline.js";
import { asLiveSample } from "./types.js";

export interface EventSourceLike {
  addEventListener(type: string, handler: (ev: { data: string }) => void): void;
  close(): void;
}

export type EventSourceFactory = (url: string) => EventSourceLike;

/** One SSE subscription feeding one sparkline buffer. Malformed frames are
 * dropped; the stream object is disposable and recreated on re-expand. */
export class LiveFeed {
  private source: EventSourceLike | null = null;

  constructor(
    private readonly url: string,
    readonly buffer: SparkBuffer,
    private readonly factory: EventSourceFactory = (u) => new EventSource(u) as EventSourceLike,
    private readonly onUpdate: () => void = () => {},
  ) {}

  start(): void {
    if (this.source) return;
    this.source = this.factory(this.url);
    this.source.addEventListener("sample", (ev) => {
      try {
        this.buffer.push(asLiveSample(JSON.parse(ev.data)));
      } catch {
        return;
      }
      this.onUpdate();
    });
  }

  stop(): void {
    this.source?.close();
    this.source = null;
  }
}
