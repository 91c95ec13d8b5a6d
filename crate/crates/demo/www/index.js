import init, { Scene, Schedule } from "./pkg/flowprompt_demo.js";

const $ = (id) => document.getElementById(id);
let scene = null;
let schedule = null;

function blit(canvas, rgba, size) {
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), size, size), 0, 0);
}

function guard(f) {
  return () => {
    $("error").value = "";
    try { f(); } catch (e) { $("error").value = String(e.message ?? e); }
  };
}

function render() {
  scene = new Scene($("shape").value, $("color").value, +$("vx").value, +$("vy").value,
    $("textured").checked, BigInt($("seed").value));
  $("caption").value = scene.caption;
  $("frame").max = scene.nFrames - 1;
  showFrame();
}

function showFrame() {
  if (!scene) return;
  const i = +$("frame").value;
  blit($("clip"), scene.frameRgba(i), scene.size);
  showNoised();
}

function flow() {
  if (!scene) return;
  const i = Math.min(+$("frame").value, scene.nFrames - 2);
  const f = scene.flow(i, +$("alpha").value, +$("iters").value);
  blit($("est"), f.estimateRgba, scene.size);
  blit($("truth"), f.truthRgba, scene.size);
  $("flowstats").value =
    `frames ${i}->${i + 1}  mean (u, v) = (${f.meanU.toFixed(3)}, ${f.meanV.toFixed(3)})  ` +
    `EPE ${f.endpointError.toFixed(3)}  TV ${f.tv.toFixed(2)}`;
  f.free();
}

function drawCurve() {
  const c = $("curve"), g = c.getContext("2d");
  const ys = schedule.alphabarCurve(c.width);
  g.clearRect(0, 0, c.width, c.height);
  g.beginPath();
  ys.forEach((y, x) => g.lineTo(x, (1 - y) * (c.height - 1)));
  g.stroke();
  const t = +$("t").value;
  const x = t / schedule.tTrain * (c.width - 1);
  g.fillStyle = "#b00";
  g.fillRect(x, 0, 1, c.height);
}

function showNoised() {
  if (!scene) return;
  const t = +$("t").value;
  blit($("noised"), scene.noisedRgba(+$("frame").value, t, schedule, 0n), scene.size);
  $("tval").value = `t = ${t}`;
  drawCurve();
}

await init();
schedule = new Schedule(1000, 1e-4, 2e-2);
$("render").onclick = guard(render);
$("frame").oninput = guard(showFrame);
$("flow").onclick = guard(flow);
$("t").oninput = guard(showNoised);
guard(render)();
guard(flow)();
