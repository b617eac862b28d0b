/** View state: single in-flight step per session, no dead reckoning.
 *
 * Every pose rendered by the UI comes from server responses or the /memory
 * endpoint; the client never integrates actions locally.
 */

import type {
  FramePayload,
  MemoryEntry,
  PointcloudPayload,
  SessionClient,
  SessionRecord,
  StepRequest,
} from "./api.js";

export interface ViewState {
  record: SessionRecord | null;
  latest: FramePayload | null;
  trail: MemoryEntry[];
  cloud: PointcloudPayload | null;
  pending: boolean;
  connected: boolean;
}

export type Listener = (s: ViewState) => void;

export class SteeringStore {
  state: ViewState = {
    record: null,
    latest: null,
    trail: [],
    cloud: null,
    pending: false,
    connected: true,
  };
  private listeners: Listener[] = [];

  constructor(private client: SessionClient) {}

  subscribe(fn: Listener) {
    this.listeners.push(fn);
  }

  private emit() {
    for (const fn of this.listeners) fn(this.state);
  }

  private patch(p: Partial<ViewState>) {
    this.state = { ...this.state, ...p };
    this.emit();
  }

  async start(mode: string, seed: number): Promise<void> {
    try {
      const record = await this.client.createSession(mode, seed);
      this.patch({
        record,
        latest: record.frame,
        trail: [{ index: record.frame.index, ...record.frame.pose }],
        connected: true,
      });
    } catch {
      this.patch({ connected: false });
      throw new Error("server unreachable");
    }
  }

  /** One in-flight step at most; extra requests while pending are refused. */
  async step(request: StepRequest): Promise<FramePayload | null> {
    if (!this.state.record || this.state.pending || !this.state.connected) {
      return null;
    }
    this.patch({ pending: true });
    try {
      const frame = await this.client.step(this.state.record.id, request);
      const memory = await this.client.memory(this.state.record.id);
      this.patch({
        latest: frame,
        trail: memory.poses,
        pending: false,
        connected: true,
      });
      return frame;
    } catch {
      this.patch({ pending: false, connected: false });
      return null;
    }
  }

  async refreshCloud(stride = 4): Promise<void> {
    if (!this.state.record || !this.state.connected) return;
    try {
      const cloud = await this.client.pointcloud(this.state.record.id, stride);
      this.patch({ cloud });
    } catch {
      this.patch({ connected: false });
    }
  }
}
