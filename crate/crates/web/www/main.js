import init, { Demo } from "./pkg/hedgegrad_web.js";

const $ = (id) => document.getElementById(id);

function paint(canvas, rgba, size) {
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), size, size), 0, 0);
}

function toggles() {
  const on = [["C", "tC"], ["A", "tA"], ["U", "tU"], ["Psi", "tPsi"]]
    .filter(([, id]) => $(id).checked)
    .map(([name]) => name);
  return on.length ? on.join("+") : "none";
}

async function main() {
  await init();
  // let the status line render before the blocking training run
  await new Promise((r) => setTimeout(r, 20));
  const demo = new Demo(7);
  const size = demo.size();
  const names = demo.classNames();
  $("status").textContent = `Model ready (held-out accuracy ${(demo.holdoutAccuracy() * 100).toFixed(1)}%).`;
  $("class").innerHTML = names.map((n, i) => `<option value="${i}">${n}</option>`).join("");

  const showScene = () => {
    paint($("image"), demo.image(), size);
    const labels = Array.from(demo.labels());
    $("labels").textContent = "Objects: " + labels.map((l) => names[l]).join(", ");
    $("class").value = String(labels[0]);
    attribute();
  };

  const attribute = () => {
    const gamma = Number($("gamma").value);
    $("gammaOut").textContent = gamma.toFixed(2);
    try {
      paint($("heat"), demo.attribute(Number($("class").value), gamma, toggles()), size);
    } catch (e) {
      $("stats").textContent = String(e.message ?? e);
      return;
    }
    const hit = demo.pointingHit();
    const pointing = hit < 0 ? "class not in scene" : hit ? "hit" : "miss";
    $("stats").textContent =
      `predicted: ${names[demo.predicted()]} | positive ratio: ${demo.positiveRatio().toFixed(3)} | pointing game: ${pointing}`;
    morf();
  };

  const morf = () => {
    const pct = Number($("morf").value);
    $("morfOut").textContent = `${pct}%`;
    paint($("probe"), demo.morfPreview(pct), size);
    $("morfResult").textContent = demo.morfCorrect() ? "classified correctly" : "misclassified";
  };

  $("scene1").onclick = () => { demo.newScene(false); showScene(); };
  $("scene2").onclick = () => { demo.newScene(true); showScene(); };
  for (const id of ["class", "gamma", "tC", "tA", "tU", "tPsi"]) $(id).oninput = attribute;
  $("morf").oninput = morf;
  showScene();
}

main().catch((e) => { $("status").textContent = "Failed to start: " + (e.message ?? e); });
