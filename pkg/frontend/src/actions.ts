/** Keyboard-to-action mapping; unbound keys return null. */

import type { StepRequest } from "./api.js";

export interface Magnitudes {
  step: number;
  turn: number; // radians
}

export const DEFAULT_MAGNITUDES: Magnitudes = {
  step: 0.25,
  turn: Math.PI / 24, // 7.5 degrees per press
};

const BINDINGS: Record<string, string> = {
  w: "forward",
  s: "back",
  a: "strafe_left",
  d: "strafe_right",
  ArrowLeft: "turn_left",
  ArrowRight: "turn_right",
  ArrowUp: "look_up",
  ArrowDown: "look_down",
  " ": "stay",
};

export function keyToAction(
  key: string,
  mags: Magnitudes = DEFAULT_MAGNITUDES,
): StepRequest | null {
  const kind = BINDINGS[key.length === 1 ? key.toLowerCase() : key];
  if (kind === undefined) return null;
  let magnitude = 0;
  if (kind === "forward" || kind === "back" || kind.startsWith("strafe")) {
    magnitude = mags.step;
  } else if (kind.startsWith("turn") || kind.startsWith("look")) {
    magnitude = mags.turn;
  }
  return { action: { kind, magnitude } };
}

export function captionRequest(text: string): StepRequest {
  return { caption: text.trim() };
}
