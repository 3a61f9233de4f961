/** Canvas drawing for the annotator: boundary overlay, selection tint,
 * pending-guess hatching, and dot markers.
 *
 * Rendering is split from state so tests can drive Session without a DOM.
 * All drawing happens in image pixel coordinates; the canvas is scaled by
 * CSS so boundary segments stay crisp at any zoom.
 */

import { SuperpixelPayload } from "./api.js";
import { LabelMap } from "./rle.js";
import { GuessState } from "./state.js";

/** Distinct fill colors cycled across instance ids. */
export const INSTANCE_COLORS: [number, number, number][] = [
  [231, 76, 60],
  [46, 204, 113],
  [52, 152, 219],
  [241, 196, 15],
  [155, 89, 182],
  [26, 188, 156],
  [230, 126, 34],
  [149, 165, 166],
];

export function instanceColor(id: number): [number, number, number] {
  return INSTANCE_COLORS[((id % INSTANCE_COLORS.length) + INSTANCE_COLORS.length) %
    INSTANCE_COLORS.length] as [number, number, number];
}

export interface OverlayBuffer {
  data: Uint8ClampedArray;
  width: number;
  height: number;
}

/** Tint the selected superpixels of every instance into an RGBA buffer.
 * The active instance renders more opaque than the rest.  Returns raw bytes
 * so the computation stays testable outside a browser. */
export function selectionOverlay(
  labelMap: LabelMap,
  instances: Map<number, Set<number>>,
  activeInstance: number,
  guess: GuessState | null,
): OverlayBuffer {
  const { height, width, labels } = labelMap;
  const data = new Uint8ClampedArray(height * width * 4);
  const owner = new Int32Array(labelMap.nSuperpixels).fill(-1);
  for (const [id, set] of instances) {
    for (const sp of set) owner[sp] = id;
  }
  const guessIds = guess && guess.pending ? guess.ids : null;
  for (let p = 0; p < labels.length; p++) {
    const sp = labels[p] as number;
    const id = owner[sp] as number;
    const base = p * 4;
    if (guessIds && guessIds.has(sp)) {
      data[base] = 255;
      data[base + 1] = 255;
      data[base + 2] = 255;
      data[base + 3] = 110;
      continue;
    }
    if (id < 0) continue;
    const [r, g, b] = instanceColor(id);
    data[base] = r;
    data[base + 1] = g;
    data[base + 2] = b;
    data[base + 3] = id === activeInstance ? 120 : 70;
  }
  return { data, width, height };
}

/** Draw superpixel boundary segments as 1px lines between pixel centers. */
export function drawBoundaries(
  ctx: CanvasRenderingContext2D,
  payload: SuperpixelPayload,
  style = "rgba(255, 255, 255, 0.6)",
): void {
  ctx.save();
  ctx.strokeStyle = style;
  ctx.lineWidth = 1;
  ctx.beginPath();
  for (const [r0, c0, r1, c1] of payload.boundaries) {
    if (r0 === r1) {
      // vertical edge between horizontally adjacent pixels
      const x = Math.max(c0, c1);
      ctx.moveTo(x, r0);
      ctx.lineTo(x, r0 + 1);
    } else {
      const y = Math.max(r0, r1);
      ctx.moveTo(c0, y);
      ctx.lineTo(c0 + 1, y);
    }
  }
  ctx.stroke();
  ctx.restore();
}

export function drawDots(
  ctx: CanvasRenderingContext2D,
  dots: [number, number][],
  radius = 3,
): void {
  ctx.save();
  ctx.fillStyle = "rgba(255, 64, 64, 0.9)";
  ctx.strokeStyle = "white";
  for (const [row, col] of dots) {
    ctx.beginPath();
    ctx.arc(col + 0.5, row + 0.5, radius, 0, 2 * Math.PI);
    ctx.fill();
    ctx.stroke();
  }
  ctx.restore();
}
