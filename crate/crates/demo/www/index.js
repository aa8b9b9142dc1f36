import init, { heatmap_dims, channel_heatmap, baseline_nmse, doppler_correlation } from "./pkg/mxlab_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function color(t) {
  // dark blue to yellow
  const r = Math.round(255 * Math.min(1, Math.max(0, 1.6 * t - 0.3)));
  const g = Math.round(255 * Math.min(1, Math.max(0, 1.2 * t)));
  const b = Math.round(255 * Math.min(1, Math.max(0, 0.8 - t)));
  return [r, g, b];
}

function drawHeatmap() {
  $("hm-slot-out").textContent = $("hm-slot").value;
  const [nt, nc] = heatmap_dims();
  const db = channel_heatmap(num("hm-v"), num("hm-seed"), num("hm-slot"));
  const cv = $("hm");
  const ctx = cv.getContext("2d");
  const lo = -30, hi = 10;
  const cw = cv.width / nc, ch = cv.height / nt;
  for (let t = 0; t < nt; t++) {
    for (let i = 0; i < nc; i++) {
      const [r, g, b] = color((db[t * nc + i] - lo) / (hi - lo));
      ctx.fillStyle = `rgb(${r},${g},${b})`;
      ctx.fillRect(i * cw, t * ch, Math.ceil(cw), Math.ceil(ch));
    }
  }
}

function runBaselines() {
  const out = $("bl-out");
  try {
    const v = baseline_nmse(num("bl-comb"), num("bl-rs"), num("bl-snr"), 0);
    const rows = ["linear", "spline", "dft"].map((m, k) =>
      `<tr><td>${m}</td><td>${Number.isNaN(v[k]) ? "n/a" : v[k].toFixed(2) + " dB"}</td></tr>`);
    out.innerHTML = "<tr><th>method</th><th>NMSE</th></tr>" + rows.join("");
  } catch (e) {
    out.innerHTML = `<tr><td class="err">${e.message ?? e}</td></tr>`;
  }
}

function runCorrelation() {
  const v = doppler_correlation(num("dc-v"), num("dc-n"));
  const n = v.length / 2;
  const emp = v.slice(0, n), j0 = v.slice(n);
  const cv = $("dc");
  const ctx = cv.getContext("2d");
  const pad = 30, w = cv.width - 2 * pad, h = cv.height - 2 * pad;
  const x = (k) => pad + (w * k) / (n - 1);
  const y = (c) => pad + (h * (1 - c)) / 2;
  ctx.clearRect(0, 0, cv.width, cv.height);
  ctx.strokeStyle = "#bbb";
  ctx.beginPath();
  ctx.moveTo(pad, y(0));
  ctx.lineTo(pad + w, y(0));
  ctx.stroke();
  ctx.fillStyle = "#444";
  ctx.fillText("1", 8, y(1) + 4);
  ctx.fillText("0", 8, y(0) + 4);
  ctx.fillText("-1", 4, y(-1) + 4);
  for (let k = 0; k < n; k++) ctx.fillText(String(k), x(k) - 3, cv.height - 8);
  ctx.strokeStyle = "#c33";
  ctx.beginPath();
  j0.forEach((c, k) => (k ? ctx.lineTo(x(k), y(c)) : ctx.moveTo(x(k), y(c))));
  ctx.stroke();
  ctx.fillStyle = "#236";
  emp.forEach((c, k) => {
    ctx.beginPath();
    ctx.arc(x(k), y(c), 4, 0, 2 * Math.PI);
    ctx.fill();
  });
}

await init();
for (const id of ["hm-v", "hm-seed", "hm-slot"]) $(id).addEventListener("input", drawHeatmap);
$("bl-run").addEventListener("click", runBaselines);
$("dc-run").addEventListener("click", runCorrelation);
drawHeatmap();
runBaselines();
runCorrelation();
