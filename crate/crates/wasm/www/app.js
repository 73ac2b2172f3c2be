import init, { plan_json, simulate_json, tune_json } from "./pkg/treepack_wasm.js";

const TREE_COLORS = ["#d63b3b", "#2458d6", "#1d8a4b", "#d98414", "#7b3bd6", "#8a5a2b", "#0f9aa8", "#c42f86"];
const MIB = 1 << 20;

const el = (id) => document.getElementById(id);
let lastPlan = null;

function gpuCount() {
  return el("preset").value === "dgx2" ? 16 : 8;
}

function renderGpuBoxes() {
  const n = gpuCount();
  const box = el("gpus");
  box.innerHTML = "";
  for (let i = 0; i < n; i++) {
    const lab = document.createElement("label");
    lab.innerHTML = `<input type="checkbox" value="${i}" checked>${i}`;
    box.appendChild(lab);
  }
}

function selectedGpus() {
  return [...el("gpus").querySelectorAll("input:checked")].map((c) => c.value).join(",");
}

function params() {
  return {
    preset: el("preset").value,
    gpus: selectedGpus(),
    primitive: el("primitive").value,
    root: parseInt(el("root").value, 10) || 0,
    bytes: parseInt(el("bytes").value, 10) * MIB,
    chunk: parseInt(el("chunk").value, 10) * MIB,
    overhead: parseFloat(el("overhead").value) || 0,
  };
}

function fail(message) {
  el("error").textContent = message || "";
}

function parse(json) {
  const v = JSON.parse(json);
  if (v.error) {
    fail(v.error);
    return null;
  }
  fail("");
  return v;
}

// --- topology drawing ------------------------------------------------------

function nodePositions(plan, w, h) {
  const gpus = plan.nodes.filter((n) => n.kind === "gpu");
  const others = plan.nodes.filter((n) => n.kind !== "gpu");
  const pos = new Map();
  const cx = w / 2, cy = h / 2, r = Math.min(w, h) / 2 - 40;
  gpus.forEach((n, i) => {
    const a = (2 * Math.PI * i) / gpus.length - Math.PI / 2;
    pos.set(n.id, [cx + r * Math.cos(a), cy + r * Math.sin(a)]);
  });
  others.forEach((n, i) => {
    const a = (2 * Math.PI * i) / Math.max(others.length, 1);
    pos.set(n.id, [cx + 0.25 * r * Math.cos(a), cy + 0.25 * r * Math.sin(a)]);
  });
  return pos;
}

function drawTopology(plan) {
  const canvas = el("topo");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const pos = nodePositions(plan, w, h);

  // Base links in light gray (NVLink solid, PCIe dashed).
  for (const l of plan.links) {
    if (l.src > l.dst) continue;
    const [x1, y1] = pos.get(l.src), [x2, y2] = pos.get(l.dst);
    ctx.strokeStyle = "#d4dbe7";
    ctx.lineWidth = 1;
    ctx.setLineDash(l.class === "pcie" ? [4, 4] : []);
    ctx.beginPath();
    ctx.moveTo(x1, y1);
    ctx.lineTo(x2, y2);
    ctx.stroke();
  }
  ctx.setLineDash([]);

  // Tree edges, one color per tree, offset so parallel trees stay visible.
  plan.trees.forEach((tree, ti) => {
    ctx.strokeStyle = TREE_COLORS[ti % TREE_COLORS.length];
    ctx.lineWidth = 1.8;
    for (const li of tree.links) {
      const l = plan.links[li];
      const [x1, y1] = pos.get(l.src), [x2, y2] = pos.get(l.dst);
      const dx = x2 - x1, dy = y2 - y1, len = Math.hypot(dx, dy) || 1;
      const off = (ti - (plan.trees.length - 1) / 2) * 2.4;
      const ox = (-dy / len) * off, oy = (dx / len) * off;
      ctx.beginPath();
      ctx.moveTo(x1 + ox, y1 + oy);
      ctx.lineTo(x2 + ox, y2 + oy);
      ctx.stroke();
      // Arrowhead at 70% of the edge.
      const ax = x1 + 0.7 * dx + ox, ay = y1 + 0.7 * dy + oy;
      ctx.beginPath();
      ctx.arc(ax, ay, 2.1, 0, 2 * Math.PI);
      ctx.fillStyle = ctx.strokeStyle;
      ctx.fill();
    }
  });

  // Nodes.
  for (const n of plan.nodes) {
    const [x, y] = pos.get(n.id);
    ctx.beginPath();
    if (n.kind === "gpu") {
      ctx.fillStyle = "#14203a";
      ctx.arc(x, y, 13, 0, 2 * Math.PI);
    } else {
      ctx.fillStyle = "#6b7a94";
      ctx.rect(x - 11, y - 11, 22, 22);
    }
    ctx.fill();
    ctx.fillStyle = "#fff";
    ctx.font = "11px system-ui";
    ctx.textAlign = "center";
    ctx.textBaseline = "middle";
    ctx.fillText(String(n.id), x, y);
  }
}

function renderPlanTable(plan) {
  const rows = [
    ["MWU candidate trees", plan.mwu_tree_count],
    ["Refined trees", plan.trees.length],
    ["Packing rate", plan.total_rate.toFixed(2) + " GB/s"],
    ["Ring baseline", `${plan.ring_count} ring(s) over ${plan.ring_class}`],
    ["Ring effective rate", plan.ring_rate.toFixed(3) + " GB/s"],
    ["Theoretical speedup", isNaN(plan.speedup) ? "n/a" : plan.speedup.toFixed(2) + "x"],
  ];
  el("planTable").innerHTML = rows
    .map(([k, v]) => `<tr><td>${k}</td><td class="num">${v}</td></tr>`)
    .join("");
  if (plan.warnings.length) fail(plan.warnings.join("\n"));
}

// --- actions ---------------------------------------------------------------

function doPlan() {
  const p = params();
  const plan = parse(plan_json(p.preset, p.gpus, p.primitive, p.root, p.bytes, p.chunk));
  if (!plan) return;
  lastPlan = plan;
  drawTopology(plan);
  renderPlanTable(plan);
}

function doSimulate() {
  const p = params();
  const sim = parse(simulate_json(p.preset, p.gpus, p.primitive, p.root, p.bytes, p.chunk, p.overhead));
  if (!sim) return;
  const rows = [
    ["Completion time", (sim.total_time * 1e3).toFixed(3) + " ms"],
    ["Throughput", sim.throughput_gbps.toFixed(2) + " GB/s"],
    ["Transfer ops", sim.ops],
    ["Streams", sim.streams],
  ];
  el("simTable").innerHTML = rows
    .map(([k, v]) => `<tr><td>${k}</td><td class="num">${v}</td></tr>`)
    .join("");
  const bars = sim.link_busy
    .sort((a, b) => b[2] - a[2])
    .slice(0, 24)
    .map(
      ([s, d, f]) =>
        `<div title="${s}->${d}: ${(f * 100).toFixed(1)}%"><span style="width:${(f * 100).toFixed(1)}%"></span><small>${s}&rarr;${d}</small></div>`
    )
    .join("");
  el("busyBars").innerHTML = bars;
}

function doTune() {
  const p = params();
  const tune = parse(tune_json(p.preset, p.gpus, p.primitive, p.root, p.bytes, MIB, p.overhead));
  if (!tune) return;
  const canvas = el("tuneChart");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const pts = tune.trajectory;
  const maxT = Math.max(...pts.map((p) => p[1])) * 1.1;
  const x = (i) => 30 + (i * (w - 50)) / Math.max(pts.length - 1, 1);
  const y = (t) => h - 20 - (t / maxT) * (h - 40);
  ctx.strokeStyle = "#c8d1de";
  ctx.beginPath();
  ctx.moveTo(30, 10);
  ctx.lineTo(30, h - 20);
  ctx.lineTo(w - 15, h - 20);
  ctx.stroke();
  ctx.strokeStyle = "#2458d6";
  ctx.lineWidth = 2;
  ctx.beginPath();
  pts.forEach(([, t], i) => (i === 0 ? ctx.moveTo(x(i), y(t)) : ctx.lineTo(x(i), y(t))));
  ctx.stroke();
  ctx.fillStyle = "#14203a";
  ctx.font = "10px system-ui";
  pts.forEach(([c, t], i) => {
    ctx.beginPath();
    ctx.arc(x(i), y(t), 3, 0, 2 * Math.PI);
    ctx.fill();
    ctx.fillText(`${(c / MIB).toFixed(0)}M`, x(i) - 6, h - 7);
  });
  ctx.fillText(
    `best: ${(tune.best_chunk / MIB).toFixed(0)} MiB @ ${tune.best_throughput.toFixed(1)} GB/s`,
    40,
    18
  );
}

async function main() {
  await init();
  renderGpuBoxes();
  el("preset").addEventListener("change", renderGpuBoxes);
  el("bytes").addEventListener("input", () => (el("bytesLabel").textContent = `${el("bytes").value} MiB`));
  el("chunk").addEventListener("input", () => (el("chunkLabel").textContent = `${el("chunk").value} MiB`));
  el("planBtn").addEventListener("click", doPlan);
  el("simBtn").addEventListener("click", doSimulate);
  el("tuneBtn").addEventListener("click", doTune);
  doPlan();
}

main();
