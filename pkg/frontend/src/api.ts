/** Typed client for the annotation service; every call goes through HTTP. */

export type Level = "small" | "medium" | "large";

export interface ImageInfo {
  id: string;
  variety?: string;
  date?: string;
  gdd?: number;
  split?: string;
  count?: number;
  segment?: number;
}

export interface SuperpixelPayload {
  image: string;
  level: Level;
  shape: [number, number];
  n_superpixels: number;
  /** Run-length encoding of the row-major label map: [label, run] pairs. */
  rle: [number, number][];
  /** Polyline segments [r0, c0, r1, c1] in pixel edge coordinates. */
  boundaries: [number, number, number, number][];
}

export interface GuessPayload {
  image: string;
  level: Level;
  alpha: number;
  ids: number[];
  means: Record<string, number>;
}

export interface InstanceJson {
  id: number;
  superpixels: number[];
}

export interface AnnotationJson {
  image: string;
  mode: "dot" | "region";
  level: Level | null;
  dots: [number, number][];
  instances: InstanceJson[];
}

export interface AnnotationDoc {
  image: string;
  level: Level;
  revision: number;
  annotation: AnnotationJson | null;
}

export interface ExportResult {
  revision: number;
  /** Server-computed total of the exported target. */
  sum: number;
  shape: [number, number];
  /** Row-major float32 target values. */
  data: Float32Array;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export class ConflictError extends ApiError {
  constructor(detail: string) {
    super(409, detail);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function errorDetail(res: Response): Promise<string> {
  try {
    const body = (await res.json()) as { detail?: unknown };
    if (typeof body.detail === "string") return body.detail;
  } catch {
    /* non-JSON error body */
  }
  return res.statusText || "request failed";
}

/** The slice of the HTTP client the annotation session depends on; tests
 * substitute an in-memory fake. */
export interface AnnotationApi {
  imageUrl(imageId: string): string;
  listImages(): Promise<ImageInfo[]>;
  getSuperpixels(imageId: string, level: Level): Promise<SuperpixelPayload>;
  getGuess(imageId: string, level: Level, alpha: number): Promise<GuessPayload>;
  getAnnotation(imageId: string, level: Level): Promise<AnnotationDoc>;
  putAnnotation(
    imageId: string,
    level: Level,
    annotation: AnnotationJson,
    expectedRevision: number,
  ): Promise<number>;
}

export class AnnotationClient implements AnnotationApi {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchImpl(this.baseUrl + path);
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    return (await res.json()) as T;
  }

  imageUrl(imageId: string): string {
    return `${this.baseUrl}/images/${encodeURIComponent(imageId)}`;
  }

  async listImages(): Promise<ImageInfo[]> {
    const body = await this.getJson<{ images: ImageInfo[] }>("/images");
    return body.images;
  }

  async getSuperpixels(imageId: string, level: Level): Promise<SuperpixelPayload> {
    return this.getJson(`/images/${encodeURIComponent(imageId)}/superpixels?level=${level}`);
  }

  async getGuess(imageId: string, level: Level, alpha: number): Promise<GuessPayload> {
    return this.getJson(
      `/images/${encodeURIComponent(imageId)}/guess?level=${level}&alpha=${alpha}`,
    );
  }

  async getAnnotation(imageId: string, level: Level): Promise<AnnotationDoc> {
    return this.getJson(`/images/${encodeURIComponent(imageId)}/annotation?level=${level}`);
  }

  async putAnnotation(
    imageId: string,
    level: Level,
    annotation: AnnotationJson,
    expectedRevision: number,
  ): Promise<number> {
    const res = await this.fetchImpl(
      `${this.baseUrl}/images/${encodeURIComponent(imageId)}/annotation?level=${level}`,
      {
        method: "PUT",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ annotation, expected_revision: expectedRevision }),
      },
    );
    if (res.status === 409) throw new ConflictError(await errorDetail(res));
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    const body = (await res.json()) as { revision: number };
    return body.revision;
  }

  /** Fetch a PDM1 target; the caller gets both the raster and the header sum. */
  async exportTarget(
    imageId: string,
    level: Level,
    kind: "density" | "detection",
  ): Promise<ExportResult> {
    const res = await this.fetchImpl(
      `${this.baseUrl}/images/${encodeURIComponent(imageId)}/export?level=${level}&kind=${kind}`,
    );
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    const raw = await res.arrayBuffer();
    const parsed = parsePdm1(raw);
    return {
      revision: Number(res.headers.get("X-Annotation-Revision") ?? "0"),
      sum: Number(res.headers.get("X-Target-Sum") ?? "NaN"),
      shape: parsed.shape,
      data: parsed.data,
    };
  }
}

/** Parse a PDM1 raster: magic, three LE uint32 dims, float32 payload. */
export function parsePdm1(buffer: ArrayBuffer): { shape: [number, number]; data: Float32Array } {
  const view = new DataView(buffer);
  if (buffer.byteLength < 16 || view.getUint32(0, false) !== 0x50444d31) {
    throw new Error("not a PDM1 raster");
  }
  const height = view.getUint32(4, true);
  const width = view.getUint32(8, true);
  const channels = view.getUint32(12, true);
  const expected = 16 + height * width * channels * 4;
  if (buffer.byteLength !== expected) {
    throw new Error(`PDM1 payload has ${buffer.byteLength - 16} bytes, expected ${expected - 16}`);
  }
  return { shape: [height, width], data: new Float32Array(buffer.slice(16)) };
}

export function sumFloat32(data: Float32Array): number {
  let total = 0;
  for (let i = 0; i < data.length; i++) total += data[i] as number;
  return total;
}
