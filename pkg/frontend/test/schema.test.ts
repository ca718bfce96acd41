import { describe, expect, it } from "vitest";

import { parseInbound, validateOutbound } from "../src/schema.js";

describe("outbound validation", () => {
  it("accepts well-formed messages", () => {
    expect(() =>
      validateOutbound({ type: "transform", position: [0, 1, -0.5], scale: 0.3 }),
    ).not.toThrow();
    expect(() =>
      validateOutbound({ type: "material", roughness: 0.4, metallic: 0, albedo: [0.5, 0.5, 0.5] }),
    ).not.toThrow();
    expect(() => validateOutbound({ type: "request_frame", buffers: ["kappa"] })).not.toThrow();
    expect(() =>
      validateOutbound({ type: "camera", position: [1, 2, 3], look_at: [0, 0, 0], fov: 50 }),
    ).not.toThrow();
  });

  it("rejects out-of-range material values", () => {
    expect(() => validateOutbound({ type: "material", roughness: 1.5 })).toThrow(/roughness/);
    expect(() => validateOutbound({ type: "material", metallic: -0.1 })).toThrow(/metallic/);
    expect(() => validateOutbound({ type: "material", albedo: [2, 0, 0] })).toThrow(/albedo/);
  });

  it("rejects bad transforms", () => {
    expect(() => validateOutbound({ type: "transform", scale: 0 })).toThrow(/scale/);
    expect(() => validateOutbound({ type: "transform", rotation: [2, 0, 0, 0] })).toThrow(
      /normalized/,
    );
    expect(() =>
      validateOutbound({ type: "transform", position: [0, NaN, 0] }),
    ).toThrow(/position/);
  });

  it("rejects unknown overlay buffers", () => {
    expect(() => validateOutbound({ type: "request_frame", buffers: ["volume"] })).toThrow(
      /unknown buffer/,
    );
  });

  it("parses inbound frames and errors only", () => {
    expect(parseInbound('{"type":"error","message":"x"}').type).toBe("error");
    expect(() => parseInbound('{"type":"transform"}')).toThrow(/unexpected/);
  });
});
