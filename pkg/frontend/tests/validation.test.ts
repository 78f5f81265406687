import { describe, expect, it } from "vitest";

import { verdictProblem } from "../src/validation.js";

describe("verdictProblem", () => {
  it("allows approvals without a reason", () => {
    expect(verdictProblem("approved", "")).toBeNull();
  });

  it("allows rejections with a reason", () => {
    expect(verdictProblem("rejected", "unnatural reply")).toBeNull();
  });

  it("blocks rejections without a reason", () => {
    expect(verdictProblem("rejected", "")).toMatch(/reason/i);
  });

  it("treats whitespace-only reasons as missing", () => {
    expect(verdictProblem("rejected", "   \n")).toMatch(/reason/i);
  });
});
