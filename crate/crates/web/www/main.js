import init, { ToyTrainer, ridge_compare, back_projection_gap } from "./pkg/protopinv_web.js";

const PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const EXTENT = 2.0;
const GRID = 80;

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

let trainer = null;
let running = false;
let seed = 1;

function reset() {
  running = false;
  $("run").textContent = "Run";
  try {
    trainer?.free();
    trainer = new ToyTrainer(num("classes"), 40, num("spread"), num("protos"), num("hidden"), BigInt(seed++));
    draw();
  } catch (e) {
    trainer = null;
    $("train-out").textContent = String(e);
  }
}

function toCanvas(x, y, size) {
  return [((x + EXTENT) / (2 * EXTENT)) * size, ((EXTENT - y) / (2 * EXTENT)) * size];
}

function draw() {
  const canvas = $("plot");
  const ctx = canvas.getContext("2d");
  const size = canvas.width;
  const cell = size / GRID;
  const map = trainer.decision_map(GRID, EXTENT);
  ctx.globalAlpha = 0.25;
  for (let i = 0; i < map.length; i++) {
    ctx.fillStyle = PALETTE[map[i] % PALETTE.length];
    ctx.fillRect((i % GRID) * cell, Math.floor(i / GRID) * cell, cell + 1, cell + 1);
  }
  ctx.globalAlpha = 1;
  const pts = trainer.points();
  const labels = trainer.labels();
  for (let i = 0; i < labels.length; i++) {
    const [u, v] = toCanvas(pts[2 * i], pts[2 * i + 1], size);
    ctx.fillStyle = PALETTE[labels[i] % PALETTE.length];
    ctx.beginPath();
    ctx.arc(u, v, 3, 0, 2 * Math.PI);
    ctx.fill();
  }
  const protos = trainer.prototypes();
  const owners = trainer.prototype_classes();
  ctx.strokeStyle = "#000";
  for (let i = 0; i < owners.length; i++) {
    const [u, v] = toCanvas(protos[2 * i], protos[2 * i + 1], size);
    ctx.fillStyle = PALETTE[owners[i] % PALETTE.length];
    ctx.fillRect(u - 5, v - 5, 10, 10);
    ctx.strokeRect(u - 5, v - 5, 10, 10);
  }
  const lambdas = Array.from(trainer.lambdas(), (l) => l.toExponential(2)).join(", ");
  $("train-out").textContent =
    `steps ${trainer.steps}  accuracy ${(100 * trainer.accuracy()).toFixed(1)}%\n` +
    `κ(Xp) ${trainer.kappa().toExponential(2)}  λ ${lambdas}`;
}

function step(count) {
  if (!trainer) return;
  trainer.step(count, num("lr"));
  draw();
}

function loop() {
  if (!running) return;
  step(5);
  requestAnimationFrame(loop);
}

function parseRows(text) {
  return text
    .trim()
    .split("\n")
    .filter((l) => l.trim())
    .map((l) => l.trim().split(/[\s,]+/).map(Number));
}

function solveRidge() {
  try {
    const a = parseRows($("ridge-a").value);
    const b = parseRows($("ridge-b").value);
    const cols = a[0].length;
    const r = ridge_compare(new Float64Array(a.flat()), a.length, cols, new Float64Array(b.flat()), num("ridge-lambda"));
    const fmt = (v) => Array.from(v, (x) => x.toPrecision(8)).join("  ");
    $("ridge-out").textContent =
      `Cholesky  ${fmt(r.cholesky)}\nSVD       ${fmt(r.svd)}\n` +
      `max |Δ|   ${r.max_gap.toExponential(2)}\n` +
      `σ(A)      ${fmt(r.singular)}\nκ(A)      ${r.kappa.toExponential(3)}`;
    r.free();
  } catch (e) {
    $("ridge-out").textContent = String(e);
  }
}

function checkBackProjection() {
  try {
    const gap = back_projection_gap(num("bp-d"), num("bp-k"), 200, BigInt(seed++));
    $("bp-out").textContent = `max output difference ${gap.toExponential(2)}`;
  } catch (e) {
    $("bp-out").textContent = String(e);
  }
}

await init();
$("status").textContent = "Ready.";
$("reset").onclick = reset;
$("step").onclick = () => step(10);
$("run").onclick = () => {
  running = !running;
  $("run").textContent = running ? "Pause" : "Run";
  loop();
};
$("ridge-go").onclick = solveRidge;
$("bp-go").onclick = checkBackProjection;
reset();
solveRidge();
