/** Run-length decoding of superpixel label maps and pixel lookup helpers. */

import type { SuperpixelPayload } from "./api.js";

export interface LabelMap {
  height: number;
  width: number;
  nSuperpixels: number;
  /** Row-major superpixel label per pixel. */
  labels: Int32Array;
}

export function decodeLabels(payload: SuperpixelPayload): LabelMap {
  const [height, width] = payload.shape;
  const labels = new Int32Array(height * width);
  let at = 0;
  for (const run of payload.rle) {
    const [label, length] = run;
    if (length <= 0) throw new Error(`invalid run length ${length}`);
    labels.fill(label, at, at + length);
    at += length;
  }
  if (at !== labels.length) {
    throw new Error(`rle covers ${at} pixels, expected ${labels.length}`);
  }
  return { height, width, nSuperpixels: payload.n_superpixels, labels };
}

export function labelAt(map: LabelMap, row: number, col: number): number {
  if (row < 0 || col < 0 || row >= map.height || col >= map.width) {
    throw new Error(`pixel (${row}, ${col}) outside ${map.height}x${map.width}`);
  }
  return map.labels[row * map.width + col] as number;
}

/** Pixel count per superpixel; useful for picking stable demo selections. */
export function superpixelAreas(map: LabelMap): Int32Array {
  const areas = new Int32Array(map.nSuperpixels);
  for (let i = 0; i < map.labels.length; i++) {
    const label = map.labels[i] as number;
    areas[label] = (areas[label] as number) + 1;
  }
  return areas;
}
