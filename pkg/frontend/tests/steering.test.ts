import { beforeEach, describe, expect, it } from "vitest";

import { DEFAULT_MAGNITUDES, captionRequest, keyToAction } from "../src/actions.js";
import { SessionClient } from "../src/api.js";
import { projectCloud, trailPoints } from "../src/render.js";
import { SteeringStore } from "../src/state.js";
import { MockServer } from "./mock_server.js";

function makeStore(server: MockServer) {
  return new SteeringStore(new SessionClient("", server.fetch));
}

describe("key bindings", () => {
  it("maps W to forward and left-arrow to turn_left", () => {
    expect(keyToAction("w")).toEqual({
      action: { kind: "forward", magnitude: DEFAULT_MAGNITUDES.step },
    });
    expect(keyToAction("W")).toEqual(keyToAction("w"));
    expect(keyToAction("ArrowLeft")).toEqual({
      action: { kind: "turn_left", magnitude: DEFAULT_MAGNITUDES.turn },
    });
    expect(keyToAction(" ")).toEqual({ action: { kind: "stay", magnitude: 0 } });
  });

  it("ignores unbound keys", () => {
    expect(keyToAction("q")).toBeNull();
    expect(keyToAction("Escape")).toBeNull();
  });

  it("wraps free text as a raw caption request", () => {
    expect(captionRequest(" move forward and turn right sharply ")).toEqual({
      caption: "move forward and turn right sharply",
    });
  });
});

describe("steering loop", () => {
  let server: MockServer;
  let store: SteeringStore;

  beforeEach(async () => {
    server = new MockServer();
    store = makeStore(server);
    await store.start("oracle", 7);
  });

  it("ten keyboard actions produce ten monotonically indexed frames", async () => {
    const indices: number[] = [];
    for (let i = 0; i < 10; i++) {
      const frame = await store.step(keyToAction("w")!);
      expect(frame).not.toBeNull();
      indices.push(frame!.index);
    }
    expect(indices).toEqual([1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
  });

  it("trail mirrors the /memory endpoint", async () => {
    for (let i = 0; i < 10; i++) await store.step(keyToAction("w")!);
    const memory = await new SessionClient("", server.fetch).memory(
      store.state.record!.id,
    );
    expect(store.state.trail).toEqual(memory.poses);
    expect(store.state.trail.map((p) => p.index)).toEqual(
      Array.from({ length: 11 }, (_, i) => i),
    );
    // 10 forward steps: the trail is a straight collinear line in (x, z)
    const pts = trailPoints(store.state.trail, 320, 240);
    const xs = new Set(pts.map(([x]) => Math.round(x * 1e6)));
    expect(xs.size).toBe(1);
  });

  it("raw caption text is echoed by the server", async () => {
    const frame = await store.step(captionRequest("move forward"));
    expect(frame!.caption).toBe("move forward");
  });

  it("allows at most one in-flight step", async () => {
    const before = server.requests.length;
    const p1 = store.step(keyToAction("w")!);
    const p2 = store.step(keyToAction("w")!); // refused while pending
    const [f1, f2] = await Promise.all([p1, p2]);
    expect(f1).not.toBeNull();
    expect(f2).toBeNull();
    // exactly one step + one memory refresh hit the server
    const stepCalls = server.requests
      .slice(before)
      .filter((u) => u.endsWith("/step")).length;
    expect(stepCalls).toBe(1);
  });

  it("performs no dead reckoning: poses come from the server only", async () => {
    // the mock advances z by the requested magnitude; the store must show
    // exactly the server's value, not a locally integrated one
    await store.step({ action: { kind: "forward", magnitude: 0.5 } });
    expect(store.state.latest!.pose.translation[2]).toBeCloseTo(0.5, 12);
  });

  it("fetches the point cloud on demand", async () => {
    expect(store.state.cloud).toBeNull();
    await store.refreshCloud();
    expect(store.state.cloud!.points.length).toBe(3);
    const projected = projectCloud(store.state.cloud!, 0.3, 320, 240);
    expect(projected.length).toBe(3);
  });
});

describe("unreachable server", () => {
  it("marks the state disconnected and refuses input", async () => {
    const server = new MockServer();
    const store = makeStore(server);
    await store.start("oracle", 7);
    server.down = true;
    const frame = await store.step(keyToAction("w")!);
    expect(frame).toBeNull();
    expect(store.state.connected).toBe(false);
    // further steps are refused locally without touching the network
    const calls = server.requests.length;
    await store.step(keyToAction("w")!);
    expect(server.requests.length).toBe(calls);
  });

  it("start() rejects when the server is down", async () => {
    const server = new MockServer();
    server.down = true;
    const store = makeStore(server);
    await expect(store.start("oracle", 7)).rejects.toThrow("unreachable");
    expect(store.state.connected).toBe(false);
  });
});
