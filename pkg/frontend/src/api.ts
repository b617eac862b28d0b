/** Typed client for the session service. */

export interface PosePayload {
  rotation: number[];
  translation: number[];
}

export interface DepthPayload {
  png16: string;
  min: number;
  max: number;
}

export interface FramePayload {
  index: number;
  rgb_png: string;
  depth: DepthPayload;
  pose: PosePayload;
  caption?: string;
}

export interface SessionRecord {
  id: string;
  mode: string;
  seed: number;
  width: number;
  height: number;
  frame: FramePayload;
}

export interface MemoryEntry extends PosePayload {
  index: number;
}

export interface PointcloudPayload {
  points: number[][];
  colors: number[][];
  stride: number;
}

export type StepRequest =
  | { action: { kind: string; magnitude: number } }
  | { caption: string };

export class SessionClient {
  constructor(
    private baseUrl: string,
    private fetchFn: typeof fetch = fetch.bind(globalThis),
  ) {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const r = await this.fetchFn(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!r.ok) throw new Error(`POST ${path} -> ${r.status}`);
    return (await r.json()) as T;
  }

  private async get<T>(path: string): Promise<T> {
    const r = await this.fetchFn(`${this.baseUrl}${path}`);
    if (!r.ok) throw new Error(`GET ${path} -> ${r.status}`);
    return (await r.json()) as T;
  }

  createSession(mode: string, seed: number, width = 64, height = 48) {
    return this.post<SessionRecord>("/sessions", { mode, seed, width, height });
  }

  step(id: string, request: StepRequest) {
    return this.post<FramePayload>(`/sessions/${id}/step`, request);
  }

  memory(id: string) {
    return this.get<{ poses: MemoryEntry[] }>(`/sessions/${id}/memory`);
  }

  pointcloud(id: string, stride = 4) {
    return this.get<PointcloudPayload>(
      `/sessions/${id}/pointcloud?stride=${stride}`,
    );
  }
}
