import init, { bin_edges, image_attack, text_attack } from "./pkg/binleak_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function drawCdf({ edges, brightness }) {
  const c = $("cdf-plot");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const lo = brightness[0], hi = brightness[brightness.length - 1];
  const x = (v) => 20 + ((v - lo) / (hi - lo || 1)) * (c.width - 40);
  const y = (p) => c.height - 20 - p * (c.height - 40);
  g.strokeStyle = "#bbb";
  for (const e of edges) {
    g.beginPath(); g.moveTo(x(e), y(0)); g.lineTo(x(e), y(1)); g.stroke();
  }
  g.strokeStyle = "#1f5fa8";
  g.beginPath();
  brightness.forEach((v, i) => {
    const p = (i + 1) / brightness.length;
    i === 0 ? g.moveTo(x(v), y(p)) : g.lineTo(x(v), y(p));
  });
  g.stroke();
  g.fillStyle = "#222";
  g.fillText(`${edges.length} edges, brightness ${lo.toFixed(3)} to ${hi.toFixed(3)}`, 24, 14);
}

function image(pixels, side) {
  const c = document.createElement("canvas");
  c.width = c.height = side;
  c.style.width = c.style.height = `${side * 2}px`;
  const g = c.getContext("2d");
  const data = g.createImageData(side, side);
  pixels.forEach((v, i) => {
    const b = Math.round(Math.min(1, Math.max(0, v)) * 255);
    data.data.set([b, b, b, 255], i * 4);
  });
  g.putImageData(data, 0, 0);
  return c;
}

function run(button, f) {
  $(button).addEventListener("click", () => {
    $(button).disabled = true;
    setTimeout(() => {
      try { f(); } catch (e) { alert(e); }
      $(button).disabled = false;
    }, 10);
  });
}

await init();

run("cdf-go", () => drawCdf(JSON.parse(bin_edges(num("cdf-k"), num("cdf-aux"), BigInt(num("cdf-seed"))))));

run("img-go", () => {
  const r = JSON.parse(image_attack(num("img-k"), num("img-n"), num("img-m"), BigInt(num("img-seed")), 24));
  $("img-summary").textContent =
    `rate ${r.rate.toFixed(3)} (${r.successes}/${r.total}), bins recovered ${r.bins_recovered}, ` +
    `exclusive ${r.occupancy.exclusive}, collided ${r.occupancy.collided}, ${r.seconds.toFixed(2)}s`;
  const out = $("img-pairs");
  out.replaceChildren();
  for (const p of r.pairs) {
    const d = document.createElement("div");
    d.className = "pair";
    d.append(image(p.original, r.side), image(p.recovered, r.side));
    const cap = document.createElement("div");
    cap.className = p.success ? "ok" : "bad";
    cap.textContent = `bin ${p.bin}, ${p.psnr === null ? "-" : p.psnr.toFixed(1)} dB`;
    d.append(cap);
    out.append(d);
  }
});

run("txt-go", () => {
  const r = JSON.parse(text_attack(num("txt-k"), num("txt-m"), num("txt-l"), BigInt(num("txt-seed"))));
  $("txt-summary").textContent = `rate ${r.rate.toFixed(3)} (${r.successes}/${r.total}), ${r.seconds.toFixed(2)}s`;
  const t = $("txt-pairs");
  t.replaceChildren();
  for (const p of r.pairs) {
    const row = t.insertRow();
    row.className = p.success ? "ok" : "bad";
    row.insertCell().textContent = `bin ${p.bin}\nWER ${p.wer.toFixed(3)}`;
    row.insertCell().textContent = p.original;
    row.insertCell().textContent = p.recovered;
  }
});

drawCdf(JSON.parse(bin_edges(32, 300, 0n)));
