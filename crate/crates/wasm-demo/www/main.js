import init, { surrogate_curve, sine_spectrum, mse_curve } from "./pkg/fdabnn_wasm.js";

const $ = (id) => document.getElementById(id);

function axes(ctx, w, h) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#ddd";
  ctx.beginPath();
  ctx.moveTo(0, h / 2); ctx.lineTo(w, h / 2);
  ctx.moveTo(w / 2, 0); ctx.lineTo(w / 2, h);
  ctx.stroke();
}

function line(ctx, xs, ys, toX, toY, color) {
  ctx.strokeStyle = color;
  ctx.beginPath();
  xs.forEach((x, i) => (i ? ctx.lineTo(toX(x), toY(ys[i])) : ctx.moveTo(toX(x), toY(ys[i]))));
  ctx.stroke();
}

function drawCurve() {
  const kind = $("kind").value, n = +$("terms").value, beta = +$("beta").value;
  $("terms-val").textContent = n;
  $("beta-val").textContent = beta;
  const c = $("curve"), ctx = c.getContext("2d");
  const ts = Float64Array.from({ length: 801 }, (_, i) => -2 + (4 * i) / 800);
  const out = surrogate_curve(kind, n, beta, ts);
  const vals = ts.map((_, i) => out[2 * i]);
  const ders = ts.map((_, i) => out[2 * i + 1]);
  const ymax = Math.max(1.5, ...ders.map(Math.abs)) * 1.05;
  const toX = (t) => ((t + 2) / 4) * c.width;
  const toY = (v) => c.height / 2 - (v / ymax) * (c.height / 2);
  axes(ctx, c.width, c.height);
  line(ctx, ts, ts.map((t) => (t > 0 ? 1 : -1)), toX, toY, "#999");
  line(ctx, ts, vals, toX, toY, "#c33");
  line(ctx, ts, ders, toX, toY, "#36c");
  drawSpectrum(kind, n, beta);
}

function drawSpectrum(kind, n, beta) {
  const k = 25;
  const v = sine_spectrum(kind, n, beta, k);
  const c = $("spectrum"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const bw = c.width / k, scale = (c.height - 20) / (4 / Math.PI);
  for (let i = 0; i < k; i++) {
    const own = v[i], ref = v[k + i];
    ctx.fillStyle = "#bbb";
    ctx.fillRect(i * bw + 2, c.height - 10 - Math.abs(ref) * scale, bw / 2 - 2, Math.abs(ref) * scale);
    ctx.fillStyle = "#c33";
    ctx.fillRect(i * bw + bw / 2, c.height - 10 - Math.abs(own) * scale, bw / 2 - 2, Math.abs(own) * scale);
  }
  ctx.fillStyle = "#222";
  ctx.fillText("harmonics 1.." + k + " (grey: sign, red: selected)", 6, 12);
}

function drawMse() {
  const maxN = Math.max(1, Math.min(128, +$("max-n").value));
  const v = mse_curve(maxN);
  const c = $("mse"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const ns = Array.from({ length: maxN + 1 }, (_, i) => i);
  const lo = Math.log10(v[2 * maxN + 1]), hi = Math.log10(v[1]);
  const toX = (n) => 10 + (n / maxN) * (c.width - 20);
  const toY = (m) => 10 + ((hi - Math.log10(m)) / (hi - lo)) * (c.height - 20);
  line(ctx, ns, ns.map((i) => v[2 * i + 1]), toX, toY, "#999");
  ctx.fillStyle = "#c33";
  ns.forEach((i) => ctx.fillRect(toX(i) - 2, toY(v[2 * i]) - 2, 4, 4));
  ctx.fillStyle = "#222";
  ctx.fillText("log MSE vs n (dots: quadrature, line: closed form); n=0: " + v[0].toFixed(5), 14, c.height - 6);
}

await init();
["kind", "terms", "beta"].forEach((id) => $(id).addEventListener("input", drawCurve));
$("mse-go").addEventListener("click", drawMse);
drawCurve();
drawMse();
