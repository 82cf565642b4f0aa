/**
 * Selection state machine: turns canvas gestures into visual controls.
 *
 * Point clicks accumulate (modifier-click adds a negative point), a box drag
 * normalizes inverted corners, and trajectory strokes are decimated to at
 * least MIN_STROKE_SPACING px between samples before submission.
 */

import type { ControlWire } from "./types.js";

export type Mode = "point" | "negative-point" | "box" | "trajectory";

export const MIN_STROKE_SPACING = 3;

interface Pt {
  x: number;
  y: number;
}

export class SelectionController {
  mode: Mode = "point";
  points: [number, number, number][] = [];
  private dragStart: Pt | null = null;
  private dragEnd: Pt | null = null;
  private stroke: [number, number][] = [];

  setMode(mode: Mode): void {
    this.mode = mode;
    this.clear();
  }

  clear(): void {
    this.points = [];
    this.dragStart = null;
    this.dragEnd = null;
    this.stroke = [];
  }

  /** Begin a gesture. `negative` reflects a held modifier key. */
  begin(x: number, y: number, negative = false): void {
    if (this.mode === "box") {
      this.dragStart = { x, y };
      this.dragEnd = { x, y };
    } else if (this.mode === "trajectory") {
      this.stroke = [[x, y]];
    } else {
      const label = this.mode === "negative-point" || negative ? 0 : 1;
      this.points.push([Math.round(x), Math.round(y), label]);
    }
  }

  move(x: number, y: number): void {
    if (this.mode === "box" && this.dragStart) {
      this.dragEnd = { x, y };
    } else if (this.mode === "trajectory" && this.stroke.length > 0) {
      const [lx, ly] = this.stroke[this.stroke.length - 1];
      if (Math.hypot(x - lx, y - ly) >= MIN_STROKE_SPACING) {
        this.stroke.push([x, y]);
      }
    }
  }

  /**
   * Finish the gesture and produce the control to submit, or null when the
   * selection is not submittable yet (e.g. negative points only).
   */
  end(x: number, y: number): ControlWire | null {
    if (this.mode === "box") {
      if (!this.dragStart) return null;
      this.move(x, y);
      const control = this.boxControl();
      this.dragStart = null;
      this.dragEnd = null;
      return control;
    }
    if (this.mode === "trajectory") {
      if (this.stroke.length === 0) return null;
      const trajectory = this.stroke;
      this.stroke = [];
      return { trajectory };
    }
    return this.pointControl();
  }

  pointControl(): ControlWire | null {
    if (!this.points.some(([, , label]) => label === 1)) {
      return null; // needs at least one positive point
    }
    return { points: [...this.points] };
  }

  private boxControl(): ControlWire | null {
    if (!this.dragStart || !this.dragEnd) return null;
    const x0 = Math.round(Math.min(this.dragStart.x, this.dragEnd.x));
    const y0 = Math.round(Math.min(this.dragStart.y, this.dragEnd.y));
    const x1 = Math.round(Math.max(this.dragStart.x, this.dragEnd.x));
    const y1 = Math.round(Math.max(this.dragStart.y, this.dragEnd.y));
    return { box: [x0, y0, x1, y1] };
  }
}
