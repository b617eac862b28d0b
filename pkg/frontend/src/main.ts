/** DOM wiring: four synchronized panels plus keyboard / free-text control. */

import { SessionClient } from "./api.js";
import { captionRequest, keyToAction } from "./actions.js";
import { drawCloud, drawDepth, drawRgb, drawTrail } from "./render.js";
import { SteeringStore } from "./state.js";

export function setupUi(root: Document, baseUrl = ""): SteeringStore {
  const client = new SessionClient(baseUrl);
  const store = new SteeringStore(client);

  const rgb = root.getElementById("rgb") as HTMLCanvasElement;
  const depth = root.getElementById("depth") as HTMLCanvasElement;
  const trail = root.getElementById("trail") as HTMLCanvasElement;
  const cloud = root.getElementById("cloud") as HTMLCanvasElement;
  const banner = root.getElementById("banner") as HTMLElement;
  const frameLabel = root.getElementById("frame-label") as HTMLElement;
  const depthLegend = root.getElementById("depth-legend") as HTMLElement;
  const captionBox = root.getElementById("caption") as HTMLInputElement;
  const cloudButton = root.getElementById("cloud-button") as HTMLButtonElement;

  let cloudAngle = 0;

  store.subscribe((s) => {
    banner.style.display = s.connected ? "none" : "block";
    captionBox.disabled = !s.connected;
    cloudButton.disabled = !s.connected;
    if (s.latest) {
      frameLabel.textContent = `frame ${s.latest.index}`;
      drawRgb(rgb, s.latest.rgb_png);
      drawDepth(depth, s.latest.depth);
      depthLegend.textContent =
        `${s.latest.depth.min.toFixed(2)} .. ${s.latest.depth.max.toFixed(2)}`;
    }
    drawTrail(trail, s.trail);
    drawCloud(cloud, s.cloud, cloudAngle);
  });

  root.addEventListener("keydown", (ev) => {
    const e = ev as KeyboardEvent;
    if (root.activeElement === captionBox) return;
    const req = keyToAction(e.key);
    if (req) {
      e.preventDefault();
      void store.step(req);
    }
  });

  captionBox.addEventListener("keydown", (ev) => {
    const e = ev as KeyboardEvent;
    if (e.key === "Enter" && captionBox.value.trim()) {
      void store.step(captionRequest(captionBox.value));
      captionBox.value = "";
    }
  });

  cloudButton.addEventListener("click", () => {
    void store.refreshCloud();
  });

  setInterval(() => {
    cloudAngle += 0.02;
    drawCloud(cloud, store.state.cloud, cloudAngle);
  }, 50);

  return store;
}

declare global {
  interface Window {
    verseStore?: SteeringStore;
  }
}

if (typeof window !== "undefined" && window.document.getElementById("rgb")) {
  const store = setupUi(window.document);
  window.verseStore = store;
  void store.start("oracle", 7).catch(() => undefined);
}
