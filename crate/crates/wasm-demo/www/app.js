import init, { value_grid, format_range, quantize_curve, multiplier_error } from "./pkg/minifloat_demo.js";

const $ = (id) => document.getElementById(id);

function report(id, fn) {
  const el = $(id);
  try {
    el.classList.remove("err");
    el.textContent = fn();
  } catch (e) {
    el.classList.add("err");
    el.textContent = String(e.message ?? e);
  }
}

function clear(ctx) {
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
}

function drawGrid() {
  report("g-out", () => {
    const fmt = $("g-fmt").value;
    const bias = parseInt($("g-bias").value, 10);
    const values = value_grid(fmt, bias);
    const [xmin, xmax] = format_range(fmt, bias);
    const ctx = $("g-plot").getContext("2d");
    clear(ctx);
    const w = ctx.canvas.width, mid = ctx.canvas.height / 2;
    // signed log axis so every binade gets the same width
    const lo = Math.log2(xmin), hi = Math.log2(xmax);
    const half = w / 2 - 10;
    const pos = (v) => {
      if (v === 0) return w / 2;
      const t = (Math.log2(Math.abs(v)) - lo) / Math.max(hi - lo, 1e-9);
      return w / 2 + Math.sign(v) * (12 + t * (half - 12));
    };
    ctx.strokeStyle = "#999";
    ctx.beginPath(); ctx.moveTo(0, mid); ctx.lineTo(w, mid); ctx.stroke();
    ctx.strokeStyle = "#1565c0";
    for (const v of values) {
      const x = pos(v);
      ctx.beginPath(); ctx.moveTo(x, mid - 20); ctx.lineTo(x, mid + 20); ctx.stroke();
    }
    ctx.fillStyle = "#444";
    ctx.fillText(`-${xmax}`, 2, mid + 35);
    ctx.fillText(`${xmax}`, w - 30, mid + 35);
    return `x_min ${xmin}  x_max ${xmax}  ${values.length} values\n${Array.from(values).join(" ")}`;
  });
}

function drawCurve() {
  $("q-e0v").textContent = Number($("q-e0").value).toFixed(2);
  report("q-out", () => {
    const fmt = $("q-fmt").value;
    const e0 = parseFloat($("q-e0").value);
    const span = parseFloat($("q-span").value);
    const n = 2000;
    const ys = quantize_curve(fmt, e0, -span, span, n);
    const [xmin, xmax, count, bias] = format_range(fmt, e0);
    const ctx = $("q-plot").getContext("2d");
    clear(ctx);
    const { width: w, height: h } = ctx.canvas;
    const sx = (x) => ((x + span) / (2 * span)) * w;
    const sy = (y) => h / 2 - (y / span) * (h / 2 - 10);
    ctx.strokeStyle = "#ccc";
    ctx.beginPath(); ctx.moveTo(0, h / 2); ctx.lineTo(w, h / 2); ctx.moveTo(w / 2, 0); ctx.lineTo(w / 2, h); ctx.stroke();
    ctx.strokeStyle = "#bbb";
    ctx.setLineDash([4, 4]);
    ctx.beginPath(); ctx.moveTo(sx(-span), sy(-span)); ctx.lineTo(sx(span), sy(span)); ctx.stroke();
    ctx.setLineDash([]);
    ctx.strokeStyle = "#c62828";
    ctx.beginPath();
    for (let i = 0; i < n; i++) {
      const x = -span + (2 * span * i) / (n - 1);
      if (i === 0) ctx.moveTo(sx(x), sy(ys[i])); else ctx.lineTo(sx(x), sy(ys[i]));
    }
    ctx.stroke();
    return `E_B = ${bias}  x_min ${xmin}  x_max ${xmax}  ${count} values`;
  });
}

function drawErrors() {
  report("m-out", () => {
    const fmt = $("m-fmt").value;
    const bias = parseInt($("m-bias").value, 10);
    const errs = multiplier_error(fmt, bias);
    const side = Math.round(Math.sqrt(errs.length));
    const ctx = $("m-plot").getContext("2d");
    clear(ctx);
    const img = ctx.createImageData(side, side);
    let worst = 0, sum = 0, count = 0;
    for (const e of errs) if (!Number.isNaN(e)) { worst = Math.max(worst, e); sum += e; count++; }
    errs.forEach((e, i) => {
      const p = 4 * i;
      if (Number.isNaN(e)) {
        img.data.set([230, 230, 230, 255], p);
      } else {
        const t = worst > 0 ? e / worst : 0;
        img.data.set([255 * t, 60, 255 * (1 - t), 255], p);
      }
    });
    const tmp = document.createElement("canvas");
    tmp.width = tmp.height = side;
    tmp.getContext("2d").putImageData(img, 0, 0);
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(tmp, 0, 0, ctx.canvas.width, ctx.canvas.height);
    return `${side}x${side} codeword pairs  max relative error ${worst.toExponential(3)}  mean ${(sum / Math.max(count, 1)).toExponential(3)}\n` +
      "rows: first operand codeword, columns: second; grey: zero product";
  });
}

await init();
for (const id of ["g-fmt", "g-bias"]) $(id).addEventListener("input", drawGrid);
for (const id of ["q-fmt", "q-e0", "q-span"]) $(id).addEventListener("input", drawCurve);
for (const id of ["m-fmt", "m-bias"]) $(id).addEventListener("input", drawErrors);
drawGrid();
drawCurve();
drawErrors();
