// Pure projection helpers: snapshot JSON in, render models out. All belief
// numbers pass through untouched — the only arithmetic here is geometry for
// the SVG layout and unit conversion for CSS widths.

import type { HistoryEntry, Marginal, SessionStatus, TraceStep } from "./api.js";

export const FEATURE_COUNT = 4;

// pairs render as edge histograms up to this size, a flat table beyond it
export const HISTOGRAM_MAX_NODES = 6;

export function nodeName(i: number): string {
  return `V${i + 1}`;
}

export function pairLabel(u: number, v: number): string {
  return `${nodeName(u)} — ${nodeName(v)}`;
}

/** The four answer choices for a pair, in feature order 1..4. */
export function featureLabels(u: number, v: number): string[] {
  const a = nodeName(u);
  const b = nodeName(v);
  return ["no edge", `${a} → ${b}`, `${b} → ${a}`, `${a} ↔ ${b}`];
}

export function featureWord(u: number, v: number, feature: number): string {
  return featureLabels(u, v)[feature - 1] ?? `feature ${feature}`;
}

/** Full-precision display string; doubles round-trip exactly through this. */
export function exact(x: number | null): string {
  return x === null ? "—" : String(x);
}

export function fixed(x: number | null, digits = 2): string {
  return x === null ? "—" : x.toFixed(digits);
}

/** Server invariant check: each 4-class marginal must sum to 1. */
export function simplexOk(p: number[], tol = 1e-6): boolean {
  let s = 0;
  for (const x of p) s += x;
  return Math.abs(s - 1) <= tol && p.every((x) => x >= 0);
}

export function useTable(n: number): boolean {
  return n > HISTOGRAM_MAX_NODES;
}

export type NodePoint = { x: number; y: number };

/** Evenly spaced points on a circle, first node at twelve o'clock. */
export function layoutNodes(
  n: number,
  cx: number,
  cy: number,
  radius: number,
): NodePoint[] {
  const pts: NodePoint[] = [];
  for (let i = 0; i < n; i++) {
    const angle = -Math.PI / 2 + (2 * Math.PI * i) / n;
    pts.push({ x: cx + radius * Math.cos(angle), y: cy + radius * Math.sin(angle) });
  }
  return pts;
}

export function midpoint(a: NodePoint, b: NodePoint): NodePoint {
  return { x: (a.x + b.x) / 2, y: (a.y + b.y) / 2 };
}

export type Bar = {
  feature: number;
  label: string;
  pct: number; // p scaled to a CSS percentage
  value: string; // exact full-precision text
};

export function histogramBars(m: Marginal): Bar[] {
  const labels = featureLabels(m.u, m.v);
  return m.p.map((p, k) => ({
    feature: k + 1,
    label: labels[k],
    pct: p * 100,
    value: exact(p),
  }));
}

export type OverlayRow = {
  u: number;
  v: number;
  label: string;
  current: string[];
  hypothetical: string[];
};

/** Pair up committed and hypothetical marginals for the what-if panel. */
export function overlayRows(current: Marginal[], hypo: Marginal[]): OverlayRow[] {
  const byPair = new Map<string, Marginal>();
  for (const m of hypo) byPair.set(`${m.u},${m.v}`, m);
  return current.map((m) => {
    const h = byPair.get(`${m.u},${m.v}`);
    return {
      u: m.u,
      v: m.v,
      label: pairLabel(m.u, m.v),
      current: m.p.map(exact),
      hypothetical: h ? h.p.map(exact) : m.p.map(() => "—"),
    };
  });
}

export type TraceSeries = {
  labels: string[];
  bic: number[];
  shd: (number | null)[];
};

export function traceSeries(steps: TraceStep[]): TraceSeries {
  return {
    labels: steps.map((s) =>
      s.query === null ? "start" : `${s.step}: ${pairLabel(s.query[0], s.query[1])}`,
    ),
    bic: steps.map((s) => s.expected_bic),
    shd: steps.map((s) => s.expected_shd),
  };
}

/**
 * Min-max normalized polyline for a sparkline. Nulls break the line; a
 * constant series draws flat across the middle.
 */
export function sparklinePath(
  values: (number | null)[],
  width: number,
  height: number,
  pad = 2,
): string {
  const present = values.filter((v): v is number => v !== null);
  if (present.length === 0) return "";
  const lo = Math.min(...present);
  const hi = Math.max(...present);
  const span = hi - lo;
  const innerW = width - 2 * pad;
  const innerH = height - 2 * pad;
  const step = values.length > 1 ? innerW / (values.length - 1) : 0;
  let path = "";
  let pen = false;
  values.forEach((v, i) => {
    if (v === null) {
      pen = false;
      return;
    }
    const x = pad + i * step;
    const y = span === 0 ? height / 2 : pad + innerH * (1 - (v - lo) / span);
    path += `${pen ? " L" : path ? " M" : "M"}${x.toFixed(1)} ${y.toFixed(1)}`;
    pen = true;
  });
  return path;
}

export function historyLine(h: HistoryEntry): string {
  return `${h.step}. ${pairLabel(h.u, h.v)}: ${featureWord(h.u, h.v, h.feature)}`;
}

export function statusBanner(status: SessionStatus): string {
  switch (status) {
    case "awaiting_answer":
      return "";
    case "exhausted":
      return "Every relation has been answered — the session is exhausted.";
    case "idle":
      return "No pending query.";
  }
}
