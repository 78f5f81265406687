/** Client-side verdict validation: rejections must carry a reason. */

import type { Verdict } from "./types.js";

export function verdictProblem(verdict: Verdict, reason: string): string | null {
  if (verdict === "rejected" && reason.trim().length === 0) {
    return "A rejection needs a reason.";
  }
  return null;
}
