// DOM wiring for the elicitation client. The committed session panels are
// re-rendered wholesale from the latest server snapshot; nothing on screen
// survives a refresh that the next GET would not restore.

import {
  ApiError,
  Client,
  type OpenSessionRequest,
  type SessionSnapshot,
  type Trace,
  type WhatifResult,
} from "./api.js";
import {
  exact,
  featureLabels,
  fixed,
  histogramBars,
  historyLine,
  layoutNodes,
  midpoint,
  overlayRows,
  pairLabel,
  simplexOk,
  sparklinePath,
  statusBanner,
  traceSeries,
  useTable,
} from "./view.js";

const SVG_NS = "http://www.w3.org/2000/svg";
const POLL_MS = 1000;

export type Controller = {
  snapshot(): SessionSnapshot | null;
  busy(): boolean;
  refreshCheckpoints(): Promise<void>;
  uploadDataset(): Promise<void>;
  startTraining(): Promise<void>;
  openSession(extra?: Partial<OpenSessionRequest>): Promise<void>;
  answer(feature: number): Promise<void>;
  whatif(): Promise<void>;
  clearWhatif(): void;
  stopPolling(): void;
};

export function initApp(doc: Document, client: Client): Controller {
  const $ = (id: string) => {
    const el = doc.getElementById(id);
    if (!el) throw new Error(`missing element #${id}`);
    return el;
  };

  // -- static controls
  const csvBox = $("dataset-csv") as HTMLTextAreaElement;
  const uploadBtn = $("upload-btn") as HTMLButtonElement;
  const datasetStatus = $("dataset-status");
  const trainBtn = $("train-btn") as HTMLButtonElement;
  const jobLine = $("job-status");
  const ckptPick = $("checkpoint-pick") as HTMLSelectElement;
  const refreshBtn = $("refresh-btn") as HTMLButtonElement;
  const piSlider = $("pi-slider") as HTMLInputElement;
  const piValue = $("pi-value");
  const strategyPick = $("strategy-pick") as HTMLSelectElement;
  const openBtn = $("open-btn") as HTMLButtonElement;
  const sessionPanel = $("session-panel");
  const canvas = $("graph-canvas");
  const pendingLabel = $("pending-label");
  const answerBox = $("answer-buttons");
  const historyList = $("history-list");
  const banner = $("banner");
  const essBadge = $("ess-badge");
  const errorLine = $("error-line");
  const whatifPair = $("whatif-pair") as HTMLSelectElement;
  const whatifFeature = $("whatif-feature") as HTMLSelectElement;
  const whatifBtn = $("whatif-btn") as HTMLButtonElement;
  const whatifClear = $("whatif-clear") as HTMLButtonElement;
  const whatifResult = $("whatif-result");
  const overlayTable = $("overlay-table");
  const traceList = $("trace-list");
  const bicSpark = $("bic-spark");
  const shdSpark = $("shd-spark");

  // -- mutable client state: one snapshot, one busy flag, one poll loop
  let snap: SessionSnapshot | null = null;
  let datasetId: string | null = null;
  let busy = false;
  let pollTimer: ReturnType<typeof setInterval> | null = null;
  let whatifSeq = 0;

  function setError(err: unknown) {
    if (err instanceof ApiError) {
      errorLine.textContent = `${err.code}: ${err.message}`;
    } else {
      errorLine.textContent = String(err);
    }
  }

  function clearError() {
    errorLine.textContent = "";
  }

  function setBusy(v: boolean) {
    busy = v;
    uploadBtn.disabled = v;
    trainBtn.disabled = v || datasetId === null;
    openBtn.disabled = v;
    for (const btn of answerBox.querySelectorAll("button")) {
      (btn as HTMLButtonElement).disabled =
        v || snap === null || snap.status !== "awaiting_answer";
    }
  }

  // -- committed-state rendering: everything below is a projection of `snap`

  function renderCanvas(s: SessionSnapshot) {
    canvas.textContent = "";
    const pending = s.pending;
    const isPending = (u: number, v: number) =>
      pending !== null && pending[0] === u && pending[1] === v;

    if (useTable(s.n)) {
      const table = doc.createElement("table");
      table.id = "marginal-table";
      const head = doc.createElement("tr");
      for (const t of ["pair", "no edge", "u → v", "v → u", "u ↔ v"]) {
        const th = doc.createElement("th");
        th.textContent = t;
        head.appendChild(th);
      }
      table.appendChild(head);
      for (const m of s.marginals) {
        const row = doc.createElement("tr");
        if (isPending(m.u, m.v)) row.className = "pending";
        const name = doc.createElement("td");
        name.textContent = pairLabel(m.u, m.v);
        row.appendChild(name);
        m.p.forEach((p, k) => {
          const cell = doc.createElement("td");
          cell.className = "marginal-cell";
          cell.dataset.u = String(m.u);
          cell.dataset.v = String(m.v);
          cell.dataset.feature = String(k + 1);
          cell.dataset.p = exact(p);
          cell.textContent = exact(p);
          row.appendChild(cell);
        });
        table.appendChild(row);
      }
      canvas.appendChild(table);
      return;
    }

    const W = 420;
    const H = 360;
    const svg = doc.createElementNS(SVG_NS, "svg");
    svg.setAttribute("viewBox", `0 0 ${W} ${H}`);
    svg.setAttribute("width", String(W));
    svg.setAttribute("height", String(H));
    const pts = layoutNodes(s.n, W / 2, H / 2, Math.min(W, H) / 2 - 50);

    for (const m of s.marginals) {
      const line = doc.createElementNS(SVG_NS, "line");
      line.setAttribute("x1", String(pts[m.u].x));
      line.setAttribute("y1", String(pts[m.u].y));
      line.setAttribute("x2", String(pts[m.v].x));
      line.setAttribute("y2", String(pts[m.v].y));
      line.setAttribute("class", isPending(m.u, m.v) ? "edge pending" : "edge");
      svg.appendChild(line);
    }

    // per-pair histogram at the edge midpoint, one bar per relation feature
    const barW = 8;
    const gap = 2;
    const maxH = 30;
    for (const m of s.marginals) {
      if (!simplexOk(m.p)) {
        // the server invariant broke; refuse to draw a misleading histogram
        const warn = doc.createElementNS(SVG_NS, "text");
        warn.textContent = `bad marginal at ${pairLabel(m.u, m.v)}`;
        warn.setAttribute("x", "8");
        warn.setAttribute("y", "14");
        warn.setAttribute("class", "invariant-violation");
        svg.appendChild(warn);
        continue;
      }
      const mid = midpoint(pts[m.u], pts[m.v]);
      const group = doc.createElementNS(SVG_NS, "g");
      group.setAttribute(
        "class",
        isPending(m.u, m.v) ? "histogram pending" : "histogram",
      );
      group.setAttribute("data-u", String(m.u));
      group.setAttribute("data-v", String(m.v));
      const x0 = mid.x - (4 * barW + 3 * gap) / 2;
      const base = mid.y + maxH / 2;
      histogramBars(m).forEach((bar, k) => {
        const h = (bar.pct / 100) * maxH;
        const rect = doc.createElementNS(SVG_NS, "rect");
        rect.setAttribute("x", String(x0 + k * (barW + gap)));
        rect.setAttribute("y", String(base - h));
        rect.setAttribute("width", String(barW));
        rect.setAttribute("height", String(h));
        rect.setAttribute("class", `bar bar-f${bar.feature}`);
        rect.setAttribute("data-u", String(m.u));
        rect.setAttribute("data-v", String(m.v));
        rect.setAttribute("data-feature", String(bar.feature));
        rect.setAttribute("data-p", bar.value);
        const tip = doc.createElementNS(SVG_NS, "title");
        tip.textContent = `${bar.label}: ${bar.value}`;
        rect.appendChild(tip);
        group.appendChild(rect);
      });
      svg.appendChild(group);
    }

    for (let i = 0; i < s.n; i++) {
      const c = doc.createElementNS(SVG_NS, "circle");
      c.setAttribute("cx", String(pts[i].x));
      c.setAttribute("cy", String(pts[i].y));
      c.setAttribute("r", "16");
      c.setAttribute("class", "node");
      svg.appendChild(c);
      const label = doc.createElementNS(SVG_NS, "text");
      label.setAttribute("x", String(pts[i].x));
      label.setAttribute("y", String(pts[i].y + 4));
      label.setAttribute("text-anchor", "middle");
      label.setAttribute("class", "node-label");
      label.textContent = `V${i + 1}`;
      svg.appendChild(label);
    }
    canvas.appendChild(svg);
  }

  function renderAnswerPanel(s: SessionSnapshot) {
    answerBox.textContent = "";
    if (s.pending === null) {
      pendingLabel.textContent = "";
      return;
    }
    const [u, v] = s.pending;
    pendingLabel.textContent = `Query: what is the relation ${pairLabel(u, v)}?`;
    featureLabels(u, v).forEach((label, k) => {
      const btn = doc.createElement("button");
      btn.className = "answer-btn";
      btn.dataset.feature = String(k + 1);
      btn.textContent = label;
      btn.disabled = busy || s.status !== "awaiting_answer";
      btn.addEventListener("click", () => {
        void answer(k + 1);
      });
      answerBox.appendChild(btn);
    });
  }

  function renderWhatifControls(s: SessionSnapshot) {
    const prev = whatifPair.value;
    whatifPair.textContent = "";
    for (const m of s.marginals) {
      const opt = doc.createElement("option");
      opt.value = `${m.u},${m.v}`;
      opt.textContent = pairLabel(m.u, m.v);
      whatifPair.appendChild(opt);
    }
    if ([...whatifPair.options].some((o) => o.value === prev)) {
      whatifPair.value = prev;
    }
    relabelWhatifFeatures();
  }

  function relabelWhatifFeatures() {
    const [u, v] = whatifPair.value.split(",").map(Number);
    const prev = whatifFeature.value;
    whatifFeature.textContent = "";
    featureLabels(u, v).forEach((label, k) => {
      const opt = doc.createElement("option");
      opt.value = String(k + 1);
      opt.textContent = label;
      whatifFeature.appendChild(opt);
    });
    if (prev) whatifFeature.value = prev;
    if (!whatifFeature.value) whatifFeature.value = "1";
  }

  function render() {
    if (snap === null) return;
    sessionPanel.removeAttribute("hidden");
    renderCanvas(snap);
    renderAnswerPanel(snap);
    renderWhatifControls(snap);

    historyList.textContent = "";
    for (const h of snap.history) {
      const li = doc.createElement("li");
      li.textContent = historyLine(h);
      historyList.appendChild(li);
    }

    banner.textContent = statusBanner(snap.status);
    banner.classList.toggle("exhausted", snap.status === "exhausted");

    essBadge.textContent = `ESS ${fixed(snap.ess, 1)}`;
    essBadge.setAttribute("data-ess", exact(snap.ess));
    essBadge.classList.toggle("warn", snap.ess_warning);

    $("metric-bic").textContent = exact(snap.expected_bic);
    $("metric-shd").textContent = exact(snap.expected_shd);
    $("metric-samples").textContent = String(snap.sample_count);
  }

  function renderTrace(trace: Trace) {
    traceList.textContent = "";
    const series = traceSeries(trace.steps);
    trace.steps.forEach((step, i) => {
      const li = doc.createElement("li");
      li.dataset.bic = exact(step.expected_bic);
      li.dataset.shd = exact(step.expected_shd);
      const shd =
        step.expected_shd === null ? "" : ` · SHD ${fixed(step.expected_shd, 3)}`;
      li.textContent = `${series.labels[i]} — BIC ${fixed(step.expected_bic, 2)}${shd} · ESS ${fixed(step.ess, 1)}`;
      traceList.appendChild(li);
    });
    bicSpark.setAttribute("d", sparklinePath(series.bic, 220, 40));
    const shdPath = sparklinePath(series.shd, 220, 40);
    shdSpark.setAttribute("d", shdPath);
    (shdSpark.parentElement as HTMLElement | null)?.classList.toggle(
      "hidden",
      shdPath === "",
    );
  }

  function renderWhatif(res: WhatifResult) {
    if (snap === null) return;
    const [u, v] = res.relation;
    whatifResult.textContent =
      `If ${pairLabel(u, v)} were answered "${featureLabels(u, v)[res.feature - 1]}": ` +
      `expected BIC ${fixed(res.expected_bic, 2)}, ESS ${fixed(res.ess, 1)}` +
      (res.expected_shd === null ? "" : `, expected SHD ${fixed(res.expected_shd, 3)}`);
    whatifResult.setAttribute("data-bic", exact(res.expected_bic));

    overlayTable.textContent = "";
    const head = doc.createElement("tr");
    for (const t of ["pair", "committed", "hypothetical"]) {
      const th = doc.createElement("th");
      th.textContent = t;
      head.appendChild(th);
    }
    overlayTable.appendChild(head);
    for (const row of overlayRows(snap.marginals, res.marginals)) {
      const tr = doc.createElement("tr");
      const name = doc.createElement("td");
      name.textContent = row.label;
      tr.appendChild(name);
      const cur = doc.createElement("td");
      cur.className = "overlay-current";
      cur.textContent = row.current.join(" / ");
      tr.appendChild(cur);
      const hyp = doc.createElement("td");
      hyp.className = "overlay-hypo";
      hyp.textContent = row.hypothetical.join(" / ");
      tr.appendChild(hyp);
      overlayTable.appendChild(tr);
    }
  }

  function clearWhatif() {
    whatifSeq++;
    whatifResult.textContent = "";
    whatifResult.removeAttribute("data-bic");
    overlayTable.textContent = "";
  }

  // -- server interactions

  async function refreshCheckpoints() {
    const { checkpoints } = await client.checkpoints();
    const prev = ckptPick.value;
    ckptPick.textContent = "";
    for (const c of checkpoints) {
      const opt = doc.createElement("option");
      opt.value = c.checkpoint_id;
      opt.textContent = `${c.checkpoint_id} (dataset ${c.dataset_id.slice(0, 8)}, ${c.epochs_run} epochs)`;
      ckptPick.appendChild(opt);
    }
    if ([...ckptPick.options].some((o) => o.value === prev)) ckptPick.value = prev;
  }

  async function uploadDataset() {
    if (busy) return;
    setBusy(true);
    clearError();
    try {
      const info = await client.uploadDataset(csvBox.value);
      datasetId = info.dataset_id;
      datasetStatus.textContent = `dataset ${info.dataset_id} (${info.rows} rows, ${info.columns.length} columns)`;
    } catch (err) {
      setError(err);
    } finally {
      setBusy(false);
    }
  }

  function stopPolling() {
    if (pollTimer !== null) {
      clearInterval(pollTimer);
      pollTimer = null;
    }
  }

  async function startTraining() {
    if (busy || datasetId === null) return;
    setBusy(true);
    clearError();
    try {
      const { job_id } = await client.startTraining(datasetId, {});
      jobLine.textContent = `job ${job_id}: queued`;
      stopPolling();
      // 1s status polling; the guard drops replies landing after a restart
      const myTimer = setInterval(() => {
        void (async () => {
          try {
            const status = await client.jobStatus(job_id);
            if (pollTimer !== myTimer) return;
            if (status.status === "running") {
              const loss =
                status.mean_loss === null ? "—" : status.mean_loss.toFixed(4);
              jobLine.textContent = `job ${job_id}: running (epoch ${status.epoch}, loss ${loss})`;
            } else if (status.status === "done") {
              jobLine.textContent = `job ${job_id}: done → checkpoint ${status.checkpoint_id}`;
              stopPolling();
              await refreshCheckpoints();
              ckptPick.value = status.checkpoint_id;
            } else if (status.status === "failed") {
              jobLine.textContent = `job ${job_id}: failed — ${status.reason}`;
              stopPolling();
            }
          } catch (err) {
            if (pollTimer === myTimer) setError(err);
          }
        })();
      }, POLL_MS);
      pollTimer = myTimer;
    } catch (err) {
      setError(err);
    } finally {
      setBusy(false);
    }
  }

  async function openSession(extra?: Partial<OpenSessionRequest>) {
    if (busy) return;
    setBusy(true);
    clearError();
    try {
      snap = await client.openSession({
        checkpoint_id: ckptPick.value,
        pi: Number(piSlider.value),
        strategy: strategyPick.value,
        ...extra,
      });
      clearWhatif();
      render();
      renderTrace(await client.trace(snap.session_id));
    } catch (err) {
      setError(err);
    } finally {
      setBusy(false);
      render();
    }
  }

  async function answer(feature: number) {
    if (busy || snap === null || snap.status !== "awaiting_answer") return;
    setBusy(true);
    clearError();
    try {
      snap = await client.answer(snap.session_id, feature);
      clearWhatif();
      render();
      renderTrace(await client.trace(snap.session_id));
    } catch (err) {
      setError(err);
    } finally {
      setBusy(false);
      render();
    }
  }

  async function whatif() {
    if (snap === null) return;
    const seq = ++whatifSeq;
    clearError();
    const [u, v] = whatifPair.value.split(",").map(Number);
    try {
      const res = await client.whatif(
        snap.session_id,
        [u, v],
        Number(whatifFeature.value),
      );
      if (seq !== whatifSeq) return; // a newer request or a commit superseded us
      renderWhatif(res);
    } catch (err) {
      if (seq === whatifSeq) setError(err);
    }
  }

  // -- wiring

  uploadBtn.addEventListener("click", () => void uploadDataset());
  trainBtn.addEventListener("click", () => void startTraining());
  refreshBtn.addEventListener("click", () => void refreshCheckpoints());
  openBtn.addEventListener("click", () => void openSession());
  whatifBtn.addEventListener("click", () => void whatif());
  whatifClear.addEventListener("click", () => clearWhatif());
  whatifPair.addEventListener("change", () => relabelWhatifFeatures());
  piSlider.addEventListener("input", () => {
    piValue.textContent = Number(piSlider.value).toFixed(2);
  });
  piValue.textContent = Number(piSlider.value).toFixed(2);
  trainBtn.disabled = true;

  return {
    snapshot: () => snap,
    busy: () => busy,
    refreshCheckpoints,
    uploadDataset,
    startTraining,
    openSession,
    answer,
    whatif,
    clearWhatif,
    stopPolling,
  };
}
