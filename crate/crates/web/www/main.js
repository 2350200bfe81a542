import init, { clusteringSeries, rateSeries, strengthMarkers, marginSeries, criticalBeta } from "./pkg/sphereflow_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function columns(flat, width) {
  const cols = Array.from({ length: width }, () => []);
  for (let i = 0; i < flat.length; i += width) {
    for (let c = 0; c < width; c++) cols[c].push(flat[i + c]);
  }
  return cols;
}

// series: [{ y, color, label }], markers: [{ x, label }]
function plot(canvas, x, series, markers = [], zeroLine = false) {
  const ctx = canvas.getContext("2d");
  const W = canvas.width, H = canvas.height, pad = 40;
  ctx.clearRect(0, 0, W, H);
  const xmin = Math.min(...x), xmax = Math.max(...x);
  const ys = series.flatMap((s) => s.y).filter(Number.isFinite);
  let ymin = Math.min(...ys), ymax = Math.max(...ys);
  if (zeroLine) { ymin = Math.min(ymin, 0); ymax = Math.max(ymax, 0); }
  if (ymax === ymin) { ymax += 1; ymin -= 1; }
  const px = (v) => pad + (v - xmin) / (xmax - xmin) * (W - 2 * pad);
  const py = (v) => H - pad - (v - ymin) / (ymax - ymin) * (H - 2 * pad);

  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, W - 2 * pad, H - 2 * pad);
  ctx.fillStyle = "#444";
  ctx.font = "11px monospace";
  ctx.fillText(xmin.toPrecision(3), pad, H - pad + 14);
  ctx.fillText(xmax.toPrecision(3), W - pad - 30, H - pad + 14);
  ctx.fillText(ymax.toPrecision(3), 2, pad + 4);
  ctx.fillText(ymin.toPrecision(3), 2, H - pad);
  if (zeroLine) {
    ctx.strokeStyle = "#ccc";
    ctx.beginPath(); ctx.moveTo(pad, py(0)); ctx.lineTo(W - pad, py(0)); ctx.stroke();
  }
  series.forEach((s, k) => {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    s.y.forEach((v, i) => (i ? ctx.lineTo(px(x[i]), py(v)) : ctx.moveTo(px(x[i]), py(v))));
    ctx.stroke();
    ctx.fillStyle = s.color;
    ctx.fillText(s.label, W - pad - 160, pad + 14 + 14 * k);
  });
  ctx.setLineDash([4, 4]);
  for (const m of markers) {
    if (!Number.isFinite(m.x) || m.x < xmin || m.x > xmax) continue;
    ctx.strokeStyle = "#888";
    ctx.beginPath(); ctx.moveTo(px(m.x), pad); ctx.lineTo(px(m.x), H - pad); ctx.stroke();
    ctx.fillStyle = "#444";
    ctx.fillText(m.label, px(m.x) + 3, pad + 12);
  }
  ctx.setLineDash([]);
}

function guarded(out, f) {
  try {
    out.classList.remove("err");
    f();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e.message ?? e);
  }
}

function clustering() {
  guarded($("c-out"), () => {
    const rows = clusteringSeries(num("c-n"), num("c-h"), num("c-l"), num("c-b"), num("c-g"), num("c-t"), $("c-k").value);
    const [t, gamma, entropy] = columns(rows, 4);
    const logn = Math.log(num("c-n"));
    plot($("c-plot"), t, [
      { y: gamma, color: "#1f77b4", label: "mean alignment" },
      { y: entropy.map((h) => h / logn), color: "#d62728", label: "entropy / log n" },
    ]);
    $("c-out").textContent = `final alignment ${gamma.at(-1).toFixed(6)}, entropy ${entropy.at(-1).toFixed(6)} (log n = ${logn.toFixed(6)})`;
  });
}

function rate() {
  guarded($("r-out"), () => {
    const [lam, phi] = columns(rateSeries(num("r-b"), num("r-n"), num("r-m"), 600), 3);
    const [star, crit] = strengthMarkers(num("r-b"), num("r-n"));
    plot($("r-plot"), lam, [{ y: phi, color: "#2ca02c", label: "phi(lambda)" }], [
      { x: star, label: "lambda*" },
      { x: crit, label: "lambda_c" },
    ]);
    $("r-out").textContent = `lambda* = ${star.toFixed(6)}, lambda_c = ${crit.toFixed(6)}`;
  });
}

function margin() {
  guarded($("m-out"), () => {
    const [beta, m] = columns(marginSeries(num("m-h"), num("m-n"), num("m-a"), num("m-lo"), num("m-hi"), 400), 2);
    const b = criticalBeta(num("m-a"), num("m-h"), num("m-n"));
    plot($("m-plot"), beta, [{ y: m, color: "#9467bd", label: "min margin" }], [{ x: b, label: "beta*" }], true);
    $("m-out").textContent = Number.isFinite(b) ? `beta* = ${b.toFixed(8)}` : "no critical beta for these parameters";
  });
}

await init();
for (const [prefix, f] of [["c-", clustering], ["r-", rate], ["m-", margin]]) {
  document.querySelectorAll(`[id^="${prefix}"]`).forEach((el) => el.addEventListener("change", f));
  f();
}
