import { LiveSample } from "./types.js";

/** Rolling per-channel sample window for the expanded-card plots. Keeps the
 * last `windowMs` of points keyed by device timestamp. */
export class SparkBuffer {
  private readonly data = new Map<string, Array<[number, number]>>();
  latestTs = 0;

  constructor(readonly windowMs = 600_000) {}

  push(sample: LiveSample): void {
    if (sample.ts_ms > this.latestTs) this.latestTs = sample.ts_ms;
    const horizon = this.latestTs - this.windowMs;
    for (const [channel, value] of Object.entries(sample.values)) {
      let points = this.data.get(channel);
      if (!points) {
        points = [];
        this.data.set(channel, points);
      }
      points.push([sample.ts_ms, value]);
      while (points.length && points[0][0] < horizon) points.shift();
    }
  }

  channels(): string[] {
    return [...this.data.keys()];
  }

  series(channel: string): Array<[number, number]> {
    return this.data.get(channel) ?? [];
  }
}

/** Map a time series onto pixel coordinates for a w x h canvas. Y is
 * min/max normalized with a flat-line fallback at mid-height. */
export function scalePath(
  points: Array<[number, number]>,
  w: number,
  h: number,
): Array<[number, number]> {
  if (points.length === 0) return [];
  const t0 = points[0][0];
  const t1 = points[points.length - 1][0];
  const span = Math.max(t1 - t0, 1);
  let lo = Infinity;
  let hi = -Infinity;
  for (const [, v] of points) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  const range = hi - lo;
  return points.map(([t, v]) => [
    ((t - t0) / span) * w,
    range === 0 ? h / 2 : h - ((v - lo) / range) * h,
  ]);
}
