import { describe, expect, it } from "vitest";
import { SparkBuffer, scalePath } from "../src/sparkline.js";

function sample(ts: number, values: Record<string, number>) {
  return { device: "d", ts_ms: ts, seq: ts, firmware: "1.0.0", values };
}

describe("SparkBuffer", () => {
  it("keeps one series per channel", () => {
    const buf = new SparkBuffer();
    buf.push(sample(1000, { co2: 420, voc: 80 }));
    buf.push(sample(2000, { co2: 430, voc: 81 }));
    expect(buf.channels().sort()).toEqual(["co2", "voc"]);
    expect(buf.series("co2")).toEqual([
      [1000, 420],
      [2000, 430],
    ]);
    expect(buf.series("nope")).toEqual([]);
  });

  it("evicts points older than the window", () => {
    const buf = new SparkBuffer(10_000);
    buf.push(sample(0, { co2: 400 }));
    buf.push(sample(5_000, { co2: 410 }));
    buf.push(sample(20_000, { co2: 500 }));
    expect(buf.series("co2")).toEqual([
      [20_000, 500],
    ]);
    buf.push(sample(25_000, { co2: 510 }));
    expect(buf.series("co2")).toEqual([
      [20_000, 500],
      [25_000, 510],
    ]);
  });
});

describe("scalePath", () => {
  it("spans the full canvas and inverts the y axis", () => {
    const path = scalePath(
      [
        [0, 400],
        [50, 600],
        [100, 500],
      ],
      200,
      40,
    );
    expect(path[0]).toEqual([0, 40]); // minimum sits at the bottom
    expect(path[1]).toEqual([100, 0]); // maximum at the top
    expect(path[2]).toEqual([200, 20]);
  });

  it("draws a flat series at mid height", () => {
    const path = scalePath(
      [
        [0, 7],
        [10, 7],
      ],
      100,
      40,
    );
    expect(path.every(([, y]) => y === 20)).toBe(true);
  });

  it("handles empty and single-point input", () => {
    expect(scalePath([], 100, 40)).toEqual([]);
    expect(scalePath([[5, 1]], 100, 40)).toEqual([[0, 20]]);
  });
});
