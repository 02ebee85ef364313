/** Browser bootstrap: DOM wiring for the viewer. */

import { ViewerApp } from "./app.js";
import { hudLine } from "./hud.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function start(): void {
  const image = el<HTMLImageElement>("frame");
  const hud = el<HTMLDivElement>("hud");
  const bannerBox = el<HTMLDivElement>("banner");
  const lStart = el<HTMLInputElement>("l-start");
  const lEnd = el<HTMLInputElement>("l-end");
  const gammaInput = el<HTMLInputElement>("gamma");
  const labels = {
    lStart: el<HTMLSpanElement>("l-start-value"),
    lEnd: el<HTMLSpanElement>("l-end-value"),
    gamma: el<HTMLSpanElement>("gamma-value"),
  };

  let lastUrl: string | null = null;
  const proto = location.protocol === "https:" ? "wss" : "ws";
  const app = new ViewerApp({
    url: `${proto}://${location.host}/ws`,
    socketFactory: (url) => {
      const ws = new WebSocket(url);
      ws.binaryType = "arraybuffer";
      return ws as unknown as import("./app.js").SocketLike;
    },
    intrinsics: { fx: 512, fy: 512, width: 512, height: 512 },
    callbacks: {
      onFrame: (frame) => {
        const blob = new Blob([frame.png.slice()], { type: "image/png" });
        const url = URL.createObjectURL(blob);
        image.src = url;
        if (lastUrl) URL.revokeObjectURL(lastUrl);
        lastUrl = url;
      },
      onHud: (state) => {
        hud.textContent = hudLine(state);
      },
      onStatus: (status, banner) => {
        bannerBox.textContent = banner ?? (status === "connected" ? "" : status);
        bannerBox.style.display =
          banner || status !== "connected" ? "block" : "none";
      },
      onBounds: (ack) => {
        lStart.max = String(ack.l_max);
        lEnd.max = String(ack.l_max);
        lStart.value = "1";
        lEnd.value = String(ack.l_max);
        gammaInput.value = String(ack.defaults.gamma);
        syncLabels();
      },
    },
  });

  function syncLabels(): void {
    if (app.lod) {
      lStart.value = String(app.lod.lStart);
      lEnd.value = String(app.lod.lEnd);
      labels.gamma.textContent = app.lod.gamma.toFixed(1);
    }
    labels.lStart.textContent = lStart.value;
    labels.lEnd.textContent = lEnd.value;
  }

  lStart.addEventListener("input", () => {
    app.adjustLStart(Number(lStart.value));
    syncLabels();
  });
  lEnd.addEventListener("input", () => {
    app.adjustLEnd(Number(lEnd.value));
    syncLabels();
  });
  gammaInput.addEventListener("input", () => {
    app.adjustGamma(Number(gammaInput.value));
    syncLabels();
  });

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  image.addEventListener("pointerdown", (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
    image.setPointerCapture(ev.pointerId);
  });
  image.addEventListener("pointermove", (ev) => {
    if (!dragging) return;
    const dx = ev.clientX - lastX;
    const dy = ev.clientY - lastY;
    lastX = ev.clientX;
    lastY = ev.clientY;
    app.orbitDrag(dx * 0.01, dy * 0.01);
  });
  image.addEventListener("pointerup", () => {
    dragging = false;
  });
  image.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    app.orbitZoom(ev.deltaY > 0 ? 1.1 : 1 / 1.1);
  });

  app.connect();
}

window.addEventListener("DOMContentLoaded", start);
