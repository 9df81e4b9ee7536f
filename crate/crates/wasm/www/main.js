// Built with `wasm-pack build crates/wasm --target web --out-dir www/pkg`.
import init, { simulate, solveSlice, lkCheck } from "./pkg/delaygame_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const status = (msg) => { $("status").textContent = msg; };

function drawSeries(canvas, t, ys, colors) {
  const g = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  g.clearRect(0, 0, w, h);
  let lo = Infinity, hi = -Infinity;
  for (const y of ys) for (const v of y) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  if (hi === lo) { hi += 1; lo -= 1; }
  const t0 = t[0], t1 = t[t.length - 1];
  const px = (x) => ((x - t0) / (t1 - t0)) * (w - 20) + 10;
  const py = (y) => h - 10 - ((y - lo) / (hi - lo)) * (h - 20);
  g.strokeStyle = "#ddd";
  g.beginPath(); g.moveTo(10, py(0)); g.lineTo(w - 10, py(0)); g.stroke();
  ys.forEach((y, k) => {
    g.strokeStyle = colors[k];
    g.beginPath();
    const step = Math.max(1, Math.floor(y.length / (2 * w)));
    for (let i = 0; i < y.length; i += step) {
      if (i === 0) g.moveTo(px(t[i]), py(y[i])); else g.lineTo(px(t[i]), py(y[i]));
    }
    g.stroke();
  });
}

function drawSlice(canvas, s) {
  const g = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const v = s.values, np = s.n_p, nv = s.n_v;
  let lo = Infinity, hi = -Infinity;
  for (const x of v) { lo = Math.min(lo, x); hi = Math.max(hi, x); }
  const cw = w / np, ch = h / nv;
  for (let i = 0; i < np; i++) {
    for (let j = 0; j < nv; j++) {
      const z = (v[i * nv + j] - lo) / (hi - lo || 1);
      g.fillStyle = `hsl(${240 - 240 * z}, 70%, 50%)`;
      // e_p to the right, e_v upwards
      g.fillRect(i * cw, h - (j + 1) * ch, cw + 1, ch + 1);
    }
  }
  return [lo, hi];
}

async function main() {
  await init();
  status("ready");

  $("run-sim").onclick = () => {
    try {
      const s = simulate(num("k"), num("b"), $("delay").value, num("tstar"), num("omega"),
        num("ep0"), num("ev0"), num("horizon"), 0.01);
      drawSeries($("sim"), s.times, [s.e_p, s.e_v], ["#c33", "#36c"]);
      const ep = s.e_p;
      status(`simulated ${ep.length} samples; final e_p = ${ep[ep.length - 1].toFixed(4)} (red e_p, blue e_v)`);
    } catch (e) { status(String(e)); }
  };

  $("run-solve").onclick = () => {
    status("solving...");
    setTimeout(() => {
      try {
        const t = performance.now();
        const s = solveSlice(num("k"), num("b"), num("umax"), num("tstar"), $("role").value,
          num("n"), 5, num("T"), num("dslice"));
        const [lo, hi] = drawSlice($("value"), s);
        status(`V(e_p, e_v, d = ${s.d.toFixed(3)}) in [${lo.toFixed(3)}, ${hi.toFixed(3)}], `
          + `e_p in [${s.ep_min}, ${s.ep_max}], e_v in [${s.ev_min}, ${s.ev_max}]; `
          + `${((performance.now() - t) / 1000).toFixed(1)} s`);
      } catch (e) { status(String(e)); }
    }, 10);
  };

  $("run-lk").onclick = () => {
    try {
      const k = num("k"), b = num("b"), T = num("tstar");
      const r = lkCheck(k, k, b, b, T, T);
      $("lk-out").textContent = `${r.satisfied ? "certified" : "not certified"}: `
        + `lhs ${r.lhs.toFixed(4)} vs rhs ${r.rhs.toFixed(4)} (margin ${r.margin.toFixed(4)})`;
    } catch (e) { $("lk-out").textContent = String(e); }
  };
}

main();
