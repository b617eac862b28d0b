/** Canvas panels: rgb frame, depth heatmap, top-down trail, rotating cloud. */

import type { DepthPayload, MemoryEntry, PointcloudPayload } from "./api.js";

export function drawRgb(canvas: HTMLCanvasElement, pngB64: string): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const img = new Image();
  img.onload = () => {
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(img, 0, 0, canvas.width, canvas.height);
  };
  img.src = `data:image/png;base64,${pngB64}`;
}

/** Blue (near) to red (far) ramp over the server-provided min/max. */
export function depthColor(t: number): [number, number, number] {
  const c = Math.max(0, Math.min(1, t));
  return [Math.round(255 * c), Math.round(64 + 80 * (1 - c)), Math.round(255 * (1 - c))];
}

export function drawDepth(canvas: HTMLCanvasElement, depth: DepthPayload): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const img = new Image();
  img.onload = () => {
    const off = document.createElement("canvas");
    off.width = img.width;
    off.height = img.height;
    const octx = off.getContext("2d");
    if (!octx) return;
    octx.drawImage(img, 0, 0);
    const data = octx.getImageData(0, 0, off.width, off.height);
    for (let i = 0; i < data.data.length; i += 4) {
      // 16-bit grayscale PNGs decode with the high byte in every channel
      const t = data.data[i] / 255;
      const [r, g, b] = depthColor(t);
      data.data[i] = r;
      data.data[i + 1] = g;
      data.data[i + 2] = b;
      data.data[i + 3] = 255;
    }
    octx.putImageData(data, 0, 0);
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  };
  img.src = `data:image/png;base64,${depth.png16}`;
}

/** Top-down (x, z) trail; the camera path is drawn oldest to newest. */
export function trailPoints(
  trail: MemoryEntry[],
  width: number,
  height: number,
  margin = 12,
): Array<[number, number]> {
  if (trail.length === 0) return [];
  const xs = trail.map((p) => p.translation[0]);
  const zs = trail.map((p) => p.translation[2]);
  const span = Math.max(
    1e-6,
    Math.max(...xs) - Math.min(...xs),
    Math.max(...zs) - Math.min(...zs),
  );
  const scale = (Math.min(width, height) - 2 * margin) / span;
  const cx = (Math.max(...xs) + Math.min(...xs)) / 2;
  const cz = (Math.max(...zs) + Math.min(...zs)) / 2;
  return trail.map((p) => [
    width / 2 + (p.translation[0] - cx) * scale,
    height / 2 - (p.translation[2] - cz) * scale,
  ]);
}

export function drawTrail(canvas: HTMLCanvasElement, trail: MemoryEntry[]): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.fillStyle = "#101418";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  const pts = trailPoints(trail, canvas.width, canvas.height);
  ctx.strokeStyle = "#4fc3f7";
  ctx.beginPath();
  pts.forEach(([x, y], i) => (i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y)));
  ctx.stroke();
  pts.forEach(([x, y], i) => {
    ctx.fillStyle = i === pts.length - 1 ? "#ffeb3b" : "#4fc3f7";
    ctx.beginPath();
    ctx.arc(x, y, i === pts.length - 1 ? 4 : 2, 0, 2 * Math.PI);
    ctx.fill();
  });
}

/** Orthographic projection of the cloud after a yaw rotation (y is down). */
export function projectCloud(
  cloud: PointcloudPayload,
  angle: number,
  width: number,
  height: number,
): Array<{ x: number; y: number; depth: number; color: string }> {
  const cos = Math.cos(angle);
  const sin = Math.sin(angle);
  const rotated = cloud.points.map(([x, y, z]) => ({
    x: x * cos + z * sin,
    y,
    z: -x * sin + z * cos,
  }));
  const xs = rotated.map((p) => p.x);
  const ys = rotated.map((p) => p.y);
  const span = Math.max(
    1e-6,
    Math.max(...xs) - Math.min(...xs),
    Math.max(...ys) - Math.min(...ys),
  );
  const scale = (Math.min(width, height) * 0.9) / span;
  const cx = (Math.max(...xs) + Math.min(...xs)) / 2;
  const cy = (Math.max(...ys) + Math.min(...ys)) / 2;
  return rotated.map((p, i) => {
    const [r, g, b] = cloud.colors[i];
    return {
      x: width / 2 + (p.x - cx) * scale,
      y: height / 2 + (p.y - cy) * scale,
      depth: p.z,
      color: `rgb(${Math.round(r * 255)},${Math.round(g * 255)},${Math.round(b * 255)})`,
    };
  });
}

export function drawCloud(
  canvas: HTMLCanvasElement,
  cloud: PointcloudPayload | null,
  angle: number,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.fillStyle = "#101418";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  if (!cloud) return;
  const pts = projectCloud(cloud, angle, canvas.width, canvas.height);
  pts.sort((a, b) => b.depth - a.depth);
  for (const p of pts) {
    ctx.fillStyle = p.color;
    ctx.fillRect(p.x, p.y, 2, 2);
  }
}
