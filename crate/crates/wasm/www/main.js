import init, { channel_sweep, behavior_race, learning_run } from "./pkg/resilab_wasm.js";

const COLORS = ["#888", "#d62728", "#1f77b4", "#2ca02c"];
const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function frame(canvas, xs, series, extra = []) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const all = series.flat().concat(extra).filter(Number.isFinite);
  let lo = Math.min(0, ...all), hi = Math.max(0, ...all);
  if (hi === lo) hi = lo + 1;
  const x0 = xs[0], x1 = xs[xs.length - 1] || 1;
  const px = (x) => 40 + ((x - x0) / (x1 - x0 || 1)) * (w - 50);
  const py = (y) => h - 20 - ((y - lo) / (hi - lo)) * (h - 30);
  ctx.strokeStyle = "#ccc";
  ctx.beginPath();
  ctx.moveTo(40, py(0));
  ctx.lineTo(w - 10, py(0));
  ctx.stroke();
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.fillText(hi.toPrecision(3), 2, py(hi) + 10);
  ctx.fillText(lo.toPrecision(3), 2, py(lo));
  return { ctx, px, py };
}

function lines(canvas, xs, series, dashed = []) {
  const { ctx, px, py } = frame(canvas, xs, series, dashed);
  ctx.setLineDash([4, 4]);
  ctx.strokeStyle = "#999";
  for (const y of dashed) {
    ctx.beginPath();
    ctx.moveTo(px(xs[0]), py(y));
    ctx.lineTo(px(xs[xs.length - 1]), py(y));
    ctx.stroke();
  }
  ctx.setLineDash([]);
  series.forEach((ys, k) => {
    ctx.strokeStyle = COLORS[(k + 1) % COLORS.length];
    ctx.beginPath();
    ys.forEach((y, i) => (i ? ctx.lineTo(px(xs[i]), py(y)) : ctx.moveTo(px(xs[i]), py(y))));
    ctx.stroke();
  });
}

function call(fn, out) {
  try {
    return JSON.parse(fn());
  } catch (e) {
    if (out) out.textContent = `error: ${e}`;
    return null;
  }
}

function sweep() {
  const out = $("s-out");
  const v = call(() => channel_sweep(num("s-gain"), num("s-bias"), num("s-q"), num("s-u2"), 10, 800), out);
  if (!v) return;
  lines($("s-plot"), v.u, [v.delta], [v.bound, -v.bound]);
  const worst = Math.max(...v.delta.map(Math.abs));
  out.textContent = `max |residual| ${worst.toFixed(4)}, bound ${v.bound.toFixed(4)}`;
}

function race() {
  const v = call(() => behavior_race(num("r-rate"), num("r-noise"), num("r-dur"), 1n), $("r-key"));
  if (!v) return;
  lines($("r-plot"), v.time, v.lanes.map((l) => l.delta));
  $("r-key").innerHTML = v.lanes
    .map((l, k) => `<span style="color:${COLORS[(k + 1) % COLORS.length]}">${l.behavior}: integrated |error| ${l.cost.toExponential(3)}</span>`)
    .join("");
}

function learn() {
  const out = $("l-out");
  const v = call(() => learning_run(BigInt(num("l-seed")), $("l-on").checked), out);
  if (!v) return;
  const costs = v.episodes.map((e) => e.cost);
  const xs = costs.map((_, i) => i);
  const { ctx, px, py } = frame($("l-plot"), xs.concat([xs.length]), [costs]);
  const bw = (px(1) - px(0)) * 0.8;
  v.episodes.forEach((e, i) => {
    ctx.fillStyle = e.strategy === "fast" ? COLORS[2] : e.strategy ? COLORS[1] : COLORS[0];
    ctx.fillRect(px(i), py(e.cost), bw, py(0) - py(e.cost));
  });
  const fast = v.episodes.filter((e) => e.strategy === "fast").length;
  const slope = v.normalized_slope === null ? "n/a" : v.normalized_slope.toFixed(4);
  out.textContent = `fast strategy in ${fast}/${v.episodes.length} episodes; verdict ${v.verdict} (normalized slope ${slope})`;
}

await init();
$("s-go").onclick = sweep;
$("r-go").onclick = race;
$("l-go").onclick = learn;
sweep();
race();
learn();
