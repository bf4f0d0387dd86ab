import init, { kernelHeatmap, latencyCurve, tinySearch } from "./pkg/spnas_web.js";

const $ = (id) => document.getElementById(id);

function drawHeatmap(h) {
  const c = $("heatmap");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const cell = 18, gap = 12;
  const max = Math.max(...h.values, 1e-12);
  for (let ch = 0; ch < h.channels; ch++) {
    const x0 = 10 + ch * (h.k * cell + gap);
    for (let y = 0; y < h.k; y++) {
      for (let x = 0; x < h.k; x++) {
        const v = h.values[ch * h.k * h.k + y * h.k + x] / max;
        const shade = Math.round(255 * (1 - v));
        ctx.fillStyle = v === 0 ? "#f3f3f3" : `rgb(${shade},${shade},255)`;
        ctx.fillRect(x0 + x * cell, 10 + y * cell, cell - 1, cell - 1);
      }
    }
    ctx.fillStyle = "#555";
    ctx.fillText(ch < h.channels / 2 ? `c${ch} (e3)` : `c${ch} (e6)`, x0, 115);
  }
}

function updateHeatmap() {
  const h = JSON.parse(kernelHeatmap(+$("hm-seed").value, +$("t-k5").value, +$("t-e3").value, +$("t-e6").value));
  drawHeatmap(h);
  const f = (a) => a.map((v) => v.toFixed(3)).join(", ");
  $("hm-out").textContent =
    `decision: ${h.decision}\nsquared norms (shell, half3, half6): ${f(h.norms)}\nthresholds (k5, e3, e6):           ${f(h.thresholds)}`;
}

function plot(canvas, series, yLabel) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: hgt } = canvas;
  ctx.clearRect(0, 0, w, hgt);
  const pad = 40;
  const xs = series.flatMap((s) => s.x), ys = series.flatMap((s) => s.y);
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  if (y1 === y0) { y1 = y0 + 1; }
  const px = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const py = (y) => hgt - pad + -((y - y0) / (y1 - y0)) * (hgt - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, hgt - 2 * pad);
  ctx.fillStyle = "#555";
  ctx.fillText(y1.toPrecision(4), 2, pad + 4);
  ctx.fillText(y0.toPrecision(4), 2, hgt - pad);
  ctx.fillText(yLabel, pad, pad - 8);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    s.x.forEach((x, i) => (i ? ctx.lineTo(px(x), py(s.y[i])) : ctx.moveTo(px(x), py(s.y[i]))));
    ctx.stroke();
  }
}

function updateCurve() {
  const c = JSON.parse(latencyCurve(+$("lc-layer").value, $("lc-gate").value, +$("lc-other").value, 51));
  plot($("curve"), [{ x: c.x, y: c.runtime_ms, color: "#1f5fbf" }], `runtime (ms) vs ${c.gate}`);
  const t = c.table;
  $("lc-out").textContent =
    `table: 3x3/e3 ${t.r33_3.toFixed(4)}  3x3/e6 ${t.r33_6.toFixed(4)}  5x5/e3 ${t.r55_3.toFixed(4)}  5x5/e6 ${t.r55_6.toFixed(4)} ms`;
}

function runSearch() {
  $("s-out").textContent = "searching...";
  // Let the status text paint before the synchronous search blocks the page.
  setTimeout(() => {
    try {
      const r = JSON.parse(tinySearch(+$("s-lambda").value, +$("s-seed").value, +$("s-epochs").value));
      const steps = r.records.map((x) => x.step);
      plot($("trace"), [
        { x: steps, y: r.records.map((x) => x.ce), color: "#bf3f1f" },
        { x: steps, y: r.records.map((x) => x.total), color: "#1f5fbf" },
      ], "loss per step (red: cross-entropy, blue: total)");
      $("s-out").textContent =
        `architecture: ${r.architecture}\npredicted runtime ${r.runtime_ms.toFixed(4)} ms (largest ${r.largest_runtime_ms.toFixed(4)} ms)\n` +
        r.epochs.map((e, i) => `epoch ${i + 1}: ${e.join("-")}`).join("\n");
    } catch (e) {
      $("s-out").textContent = `error: ${e}`;
    }
  }, 20);
}

async function main() {
  await init();
  $("status").textContent = "";
  for (let i = 0; i < 6; i++) $("lc-layer").add(new Option(`${i}`, `${i}`));
  for (const id of ["t-k5", "t-e3", "t-e6", "hm-seed"]) $(id).addEventListener("input", updateHeatmap);
  for (const id of ["lc-layer", "lc-gate", "lc-other"]) $(id).addEventListener("input", updateCurve);
  $("s-run").addEventListener("click", runSearch);
  updateHeatmap();
  updateCurve();
}

main().catch((e) => { $("status").textContent = `failed to load: ${e}`; });
