/** Annotation session state: per-level selections, guess review, submits.
 *
 * The page renders from this state and never talks to the server directly;
 * every mutation of server state goes through submit().  Switching the
 * superpixel level keeps each level's working annotation independent, and a
 * stale-revision submit surfaces a conflict for the user to resolve instead
 * of silently overwriting.
 */

import {
  AnnotationApi,
  AnnotationJson,
  ConflictError,
  GuessPayload,
  Level,
  SuperpixelPayload,
} from "./api.js";
import { LabelMap, decodeLabels } from "./rle.js";

export type Mode = "region" | "dot";

export interface LevelState {
  level: Level;
  superpixels: SuperpixelPayload;
  labelMap: LabelMap;
  /** Instance id -> selected superpixel ids (disjoint across instances). */
  instances: Map<number, Set<number>>;
  activeInstance: number;
  nextInstanceId: number;
  revision: number;
  dirty: boolean;
}

export interface GuessState {
  alpha: number;
  ids: Set<number>;
  means: Record<string, number>;
  /** Pending guesses render in a distinct style until accepted or rejected. */
  pending: boolean;
}

export interface ConflictState {
  expectedRevision: number;
  message: string;
}

export const LEVELS: Level[] = ["small", "medium", "large"];
export const DEFAULT_ALPHA = 0.4;
export const ALPHA_RANGE: [number, number] = [0.3, 0.6];

function levelFromDoc(
  level: Level,
  superpixels: SuperpixelPayload,
  revision: number,
  annotation: AnnotationJson | null,
): LevelState {
  const instances = new Map<number, Set<number>>();
  let nextId = 0;
  if (annotation && annotation.mode === "region") {
    for (const inst of annotation.instances) {
      instances.set(inst.id, new Set(inst.superpixels));
      nextId = Math.max(nextId, inst.id + 1);
    }
  }
  if (instances.size === 0) {
    instances.set(0, new Set());
    nextId = 1;
  }
  const first = instances.keys().next().value as number;
  return {
    level,
    superpixels,
    labelMap: decodeLabels(superpixels),
    instances,
    activeInstance: first,
    nextInstanceId: nextId,
    revision,
    dirty: false,
  };
}

export class Session {
  imageId = "";
  mode: Mode = "region";
  level: Level = "small";
  levels = new Map<Level, LevelState>();
  dots: [number, number][] = [];
  dotRevision = 0;
  dotsDirty = false;
  guess: GuessState | null = null;
  conflict: ConflictState | null = null;
  lastError: string | null = null;

  constructor(readonly client: AnnotationApi) {}

  current(): LevelState {
    const state = this.levels.get(this.level);
    if (!state) throw new Error(`level ${this.level} not loaded`);
    return state;
  }

  /** Load an image's annotation and superpixels for the current level. */
  async open(imageId: string, level: Level = "small"): Promise<void> {
    this.imageId = imageId;
    this.levels.clear();
    this.guess = null;
    this.conflict = null;
    this.dots = [];
    this.dotsDirty = false;
    await this.setLevel(level);
  }

  /** Switch granularity; selections made at other levels stay intact. */
  async setLevel(level: Level): Promise<void> {
    this.level = level;
    this.guess = null;
    if (this.levels.has(level)) return;
    const [superpixels, doc] = await Promise.all([
      this.client.getSuperpixels(this.imageId, level),
      this.client.getAnnotation(this.imageId, level),
    ]);
    this.levels.set(level, levelFromDoc(level, superpixels, doc.revision, doc.annotation));
    if (doc.annotation && doc.annotation.mode === "dot") {
      this.dots = [...doc.annotation.dots];
      this.dotRevision = doc.revision;
    }
  }

  /** Toggle a superpixel in the active instance.  Adding steals it from any
   * other instance so instances stay disjoint (the server rejects overlap). */
  toggleSuperpixel(spId: number): void {
    const state = this.current();
    if (spId < 0 || spId >= state.labelMap.nSuperpixels) {
      throw new Error(`superpixel ${spId} outside 0..${state.labelMap.nSuperpixels - 1}`);
    }
    const active = state.instances.get(state.activeInstance);
    if (!active) throw new Error(`active instance ${state.activeInstance} missing`);
    if (active.has(spId)) {
      active.delete(spId);
    } else {
      for (const [, set] of state.instances) set.delete(spId);
      active.add(spId);
    }
    state.dirty = true;
  }

  /** Toggle a superpixel by pixel coordinates, as a canvas click would. */
  toggleAtPixel(row: number, col: number): number {
    const state = this.current();
    const spId = state.labelMap.labels[row * state.labelMap.width + col];
    if (spId === undefined) throw new Error(`pixel (${row}, ${col}) out of range`);
    this.toggleSuperpixel(spId);
    return spId;
  }

  newInstance(): number {
    const state = this.current();
    const id = state.nextInstanceId++;
    state.instances.set(id, new Set());
    state.activeInstance = id;
    return id;
  }

  cycleInstance(): number {
    const state = this.current();
    const ids = [...state.instances.keys()].sort((a, b) => a - b);
    const at = ids.indexOf(state.activeInstance);
    const next = ids[(at + 1) % ids.length] as number;
    state.activeInstance = next;
    return next;
  }

  selectInstance(id: number): void {
    const state = this.current();
    if (!state.instances.has(id)) throw new Error(`no instance ${id}`);
    state.activeInstance = id;
  }

  async fetchGuess(alpha: number = DEFAULT_ALPHA): Promise<GuessPayload> {
    const payload = await this.client.getGuess(this.imageId, this.level, alpha);
    this.guess = {
      alpha: payload.alpha,
      ids: new Set(payload.ids),
      means: payload.means,
      pending: true,
    };
    return payload;
  }

  /** Accept the pending guess: the active instance becomes the guess set,
   * stealing superpixels from other instances, and stays editable. */
  acceptGuess(): void {
    const state = this.current();
    if (!this.guess || !this.guess.pending) throw new Error("no pending guess");
    for (const [, set] of state.instances) {
      for (const id of this.guess.ids) set.delete(id);
    }
    state.instances.set(state.activeInstance, new Set(this.guess.ids));
    state.dirty = true;
    this.guess.pending = false;
  }

  rejectGuess(): void {
    this.guess = null;
  }

  placeDot(row: number, col: number): void {
    const at = this.dots.findIndex(([r, c]) => r === row && c === col);
    if (at >= 0) this.dots.splice(at, 1);
    else this.dots.push([row, col]);
    this.dotsDirty = true;
  }

  /** The annotation document submit() would send for the current mode. */
  buildAnnotation(): AnnotationJson {
    if (this.mode === "dot") {
      return { image: this.imageId, mode: "dot", level: null, dots: [...this.dots], instances: [] };
    }
    const state = this.current();
    const instances = [...state.instances.entries()]
      .filter(([, set]) => set.size > 0)
      .map(([id, set]) => ({ id, superpixels: [...set].sort((a, b) => a - b) }));
    return { image: this.imageId, mode: "region", level: state.level, dots: [], instances };
  }

  /** PUT the working annotation; a stale revision raises a visible conflict
   * and leaves both the local edits and the server state untouched. */
  async submit(): Promise<number | null> {
    const annotation = this.buildAnnotation();
    const state = this.mode === "region" ? this.current() : null;
    const expected = state ? state.revision : this.dotRevision;
    try {
      const revision = await this.client.putAnnotation(
        this.imageId,
        this.level,
        annotation,
        expected,
      );
      if (state) {
        state.revision = revision;
        state.dirty = false;
      } else {
        this.dotRevision = revision;
        this.dotsDirty = false;
      }
      this.conflict = null;
      this.lastError = null;
      return revision;
    } catch (err) {
      if (err instanceof ConflictError) {
        this.conflict = { expectedRevision: expected, message: err.detail };
        return null;
      }
      this.lastError = err instanceof Error ? err.message : String(err);
      throw err;
    }
  }

  /** Resolve a conflict by reloading the server's annotation for this level. */
  async reloadFromServer(): Promise<void> {
    const doc = await this.client.getAnnotation(this.imageId, this.level);
    const superpixels = this.current().superpixels;
    this.levels.set(
      this.level,
      levelFromDoc(this.level, superpixels, doc.revision, doc.annotation),
    );
    if (doc.annotation && doc.annotation.mode === "dot") {
      this.dots = [...doc.annotation.dots];
      this.dotRevision = doc.revision;
      this.dotsDirty = false;
    }
    this.conflict = null;
  }

  /** Selected superpixels per instance at the current level, for rendering. */
  selections(): Map<number, Set<number>> {
    return this.current().instances;
  }
}
