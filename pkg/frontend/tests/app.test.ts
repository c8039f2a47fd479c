import { readFileSync } from "node:fs";
import { join } from "node:path";
import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import {
  ApiError,
  type Client,
  type JobStatus,
  type SessionSnapshot,
  type Trace,
  type WhatifResult,
} from "../src/api.js";
import { initApp, type Controller } from "../src/app.js";

// vitest runs from the package root; import.meta.url is http: under jsdom
const html = readFileSync(join(process.cwd(), "index.html"), "utf8");
const bodyMarkup = html.slice(html.indexOf("<body>") + 6, html.indexOf("</body>"));

function snapFixture(overrides: Partial<SessionSnapshot> = {}): SessionSnapshot {
  return {
    session_id: "s1",
    checkpoint_id: "ck1",
    dataset_id: "d1",
    status: "awaiting_answer",
    n: 3,
    pi: 0.9,
    strategy: "cross_entropy",
    sample_count: 400,
    pending: [0, 1],
    marginals: [
      { u: 0, v: 1, p: [0.1, 0.2, 0.3, 0.4] },
      { u: 0, v: 2, p: [0.4, 0.3, 0.2, 0.1] },
      { u: 1, v: 2, p: [0.25, 0.25, 0.25, 0.25] },
    ],
    history: [],
    expected_bic: 4521.25,
    expected_shd: null,
    ess: 400,
    ess_warning: false,
    created_at: "2026-01-01T00:00:00Z",
    updated_at: "2026-01-01T00:00:00Z",
    ...overrides,
  };
}

function traceFixture(snapshots: SessionSnapshot[]): Trace {
  return {
    session_id: "s1",
    status: snapshots[snapshots.length - 1].status,
    steps: snapshots.map((s, i) => ({
      step: i,
      query: i === 0 ? null : [0, 1],
      answer: i === 0 ? null : 2,
      expected_bic: s.expected_bic,
      expected_shd: s.expected_shd,
      ess: s.ess,
    })),
  };
}

// inferred from vi.fn so the mock surface tracks whatever vitest ships
function stubClient(snap: SessionSnapshot) {
  return {
    base: "http://stub/v1",
    health: vi.fn(async () => ({ status: "ok" })),
    uploadDataset: vi.fn(async () => ({
      dataset_id: "d1",
      columns: ["V1", "V2", "V3"],
      rows: 400,
    })),
    startTraining: vi.fn(async () => ({ job_id: "j1" })),
    jobStatus: vi.fn(async (): Promise<JobStatus> => ({ status: "queued" })),
    checkpoints: vi.fn(async () => ({
      checkpoints: [
        {
          checkpoint_id: "ck1",
          dataset_id: "d1",
          reward_spec: { mu: 0, sigma: 1, temperature: 1 },
          epochs_run: 12,
          stopped_early: true,
        },
      ],
    })),
    openSession: vi.fn(async () => snap),
    getSession: vi.fn(async () => snap),
    answer: vi.fn(async () => snap),
    whatif: vi.fn(async (): Promise<WhatifResult> => {
      throw new Error("unstubbed");
    }),
    trace: vi.fn(async () => traceFixture([snap])),
  };
}

type Stub = ReturnType<typeof stubClient>;

function deferred<T>() {
  let resolve!: (v: T) => void;
  let reject!: (e: unknown) => void;
  const promise = new Promise<T>((res, rej) => {
    resolve = res;
    reject = rej;
  });
  return { promise, resolve, reject };
}

const flush = async () => {
  for (let i = 0; i < 8; i++) await Promise.resolve();
};

let controller: Controller | null = null;

beforeEach(() => {
  document.body.innerHTML = bodyMarkup;
});

afterEach(() => {
  controller?.stopPolling();
  controller = null;
  vi.useRealTimers();
});

function boot(client: Stub): Controller {
  controller = initApp(document, client as unknown as Client);
  return controller;
}

function barValues(): Map<string, string> {
  const out = new Map<string, string>();
  for (const rect of document.querySelectorAll("rect.bar")) {
    const key = `${rect.getAttribute("data-u")},${rect.getAttribute("data-v")},${rect.getAttribute("data-feature")}`;
    out.set(key, rect.getAttribute("data-p") ?? "");
  }
  return out;
}

describe("session rendering", () => {
  it("projects the snapshot into edge histograms with exact values", async () => {
    const snap = snapFixture();
    const app = boot(stubClient(snap));
    await app.openSession();

    expect(document.getElementById("session-panel")!.hasAttribute("hidden")).toBe(false);
    const bars = barValues();
    expect(bars.size).toBe(12);
    for (const m of snap.marginals) {
      m.p.forEach((p, k) => {
        expect(bars.get(`${m.u},${m.v},${k + 1}`)).toBe(String(p));
      });
    }
    // the pending pair is highlighted on both the edge and its histogram
    expect(document.querySelectorAll("line.edge.pending")).toHaveLength(1);
    const hl = document.querySelector("g.histogram.pending")!;
    expect(hl.getAttribute("data-u")).toBe("0");
    expect(hl.getAttribute("data-v")).toBe("1");

    const buttons = [...document.querySelectorAll(".answer-btn")];
    expect(buttons.map((b) => b.textContent)).toEqual([
      "no edge",
      "V1 → V2",
      "V2 → V1",
      "V1 ↔ V2",
    ]);
    expect(document.getElementById("metric-bic")!.textContent).toBe("4521.25");
    expect(document.getElementById("metric-shd")!.textContent).toBe("—");
  });

  it("falls back to a plain table above six nodes", async () => {
    const n = 7;
    const pairs: Array<[number, number]> = [];
    for (let u = 0; u < n; u++) for (let v = u + 1; v < n; v++) pairs.push([u, v]);
    const snap = snapFixture({
      n,
      pending: [0, 1],
      marginals: pairs.map(([u, v]) => ({ u, v, p: [0.25, 0.25, 0.25, 0.25] })),
    });
    const app = boot(stubClient(snap));
    await app.openSession();

    expect(document.querySelector("svg #marginal-table")).toBeNull();
    expect(document.querySelector("#graph-canvas svg")).toBeNull();
    const cells = document.querySelectorAll("td.marginal-cell");
    expect(cells).toHaveLength(pairs.length * 4);
    expect(cells[0].textContent).toBe("0.25");
    expect(document.querySelectorAll("tr.pending")).toHaveLength(1);
  });

  it("flags a marginal that fails the sum-to-one invariant", async () => {
    const snap = snapFixture();
    snap.marginals[1] = { u: 0, v: 2, p: [0.1, 0.1, 0.1, 0.1] };
    const app = boot(stubClient(snap));
    await app.openSession();

    expect(document.querySelector(".invariant-violation")).not.toBeNull();
    expect(document.querySelectorAll("rect.bar")).toHaveLength(8);
  });

  it("shows the warning badge exactly when the service flags the ESS", async () => {
    const ok = boot(stubClient(snapFixture()));
    await ok.openSession();
    const badge = document.getElementById("ess-badge")!;
    expect(badge.classList.contains("warn")).toBe(false);
    expect(badge.textContent).toBe("ESS 400.0");

    document.body.innerHTML = bodyMarkup;
    const warn = boot(stubClient(snapFixture({ ess: 8.2, ess_warning: true })));
    await warn.openSession();
    const badge2 = document.getElementById("ess-badge")!;
    expect(badge2.classList.contains("warn")).toBe(true);
    expect(badge2.getAttribute("data-ess")).toBe("8.2");
  });

  it("renders the exhausted banner and no answer buttons", async () => {
    const snap = snapFixture({
      status: "exhausted",
      pending: null,
      history: [
        { step: 1, u: 0, v: 1, feature: 2 },
        { step: 2, u: 0, v: 2, feature: 1 },
        { step: 3, u: 1, v: 2, feature: 4 },
      ],
    });
    const app = boot(stubClient(snap));
    await app.openSession();

    const bannerEl = document.getElementById("banner")!;
    expect(bannerEl.textContent).toContain("exhausted");
    expect(bannerEl.classList.contains("exhausted")).toBe(true);
    expect(bannerEl.closest("#trace-panel")).not.toBeNull();
    expect(document.querySelectorAll(".answer-btn")).toHaveLength(0);
    expect(document.querySelectorAll("#history-list li")).toHaveLength(3);
    expect(document.getElementById("pending-label")!.textContent).toBe("");
  });

  it("surfaces API errors without leaving the app busy", async () => {
    const client = stubClient(snapFixture());
    client.openSession.mockRejectedValueOnce(
      new ApiError(404, "checkpoint_not_found", "no checkpoint 'zzz'"),
    );
    const app = boot(client);
    await app.openSession();

    expect(document.getElementById("error-line")!.textContent).toContain(
      "checkpoint_not_found",
    );
    expect(app.busy()).toBe(false);
    expect(app.snapshot()).toBeNull();
    expect(document.getElementById("session-panel")!.hasAttribute("hidden")).toBe(true);
  });
});

describe("answering", () => {
  it("advances the history by one and refreshes the trace", async () => {
    const first = snapFixture();
    const second = snapFixture({
      pending: [0, 2],
      history: [{ step: 1, u: 0, v: 1, feature: 2 }],
      expected_bic: 4480.5,
      ess: 231.75,
    });
    const client = stubClient(first);
    client.answer.mockResolvedValueOnce(second);
    client.trace
      .mockResolvedValueOnce(traceFixture([first]))
      .mockResolvedValueOnce(traceFixture([first, second]));
    const app = boot(client);
    await app.openSession();

    await app.answer(2);

    expect(client.answer).toHaveBeenCalledWith("s1", 2);
    expect(document.querySelectorAll("#history-list li")).toHaveLength(1);
    expect(document.getElementById("history-list")!.textContent).toContain("V1 → V2");
    expect(document.getElementById("pending-label")!.textContent).toContain("V1 — V3");
    expect(document.getElementById("metric-bic")!.textContent).toBe("4480.5");
    expect(document.querySelectorAll("#trace-list li")).toHaveLength(2);
    expect(client.trace).toHaveBeenCalledTimes(2);
  });

  it("drives the same flow from a button click", async () => {
    const first = snapFixture();
    const second = snapFixture({
      pending: null,
      status: "idle",
      history: [{ step: 1, u: 0, v: 1, feature: 3 }],
    });
    const client = stubClient(first);
    client.answer.mockResolvedValueOnce(second);
    const app = boot(client);
    await app.openSession();

    const btn = document.querySelector<HTMLButtonElement>(
      '.answer-btn[data-feature="3"]',
    )!;
    btn.click();
    await vi.waitFor(() => {
      expect(document.querySelectorAll("#history-list li")).toHaveLength(1);
    });
    expect(client.answer).toHaveBeenCalledWith("s1", 3);
  });

  it("keeps at most one mutating request in flight", async () => {
    const client = stubClient(snapFixture());
    const gate = deferred<SessionSnapshot>();
    client.answer.mockReturnValueOnce(gate.promise);
    const app = boot(client);
    await app.openSession();

    const inFlight = app.answer(2);
    expect(app.busy()).toBe(true);
    for (const btn of document.querySelectorAll<HTMLButtonElement>(".answer-btn")) {
      expect(btn.disabled).toBe(true);
    }
    expect(
      (document.getElementById("open-btn") as HTMLButtonElement).disabled,
    ).toBe(true);

    await app.answer(3); // swallowed by the guard
    expect(client.answer).toHaveBeenCalledTimes(1);

    gate.resolve(snapFixture({ history: [{ step: 1, u: 0, v: 1, feature: 2 }] }));
    await inFlight;
    expect(app.busy()).toBe(false);
    const buttons = document.querySelectorAll<HTMLButtonElement>(".answer-btn");
    expect(buttons.length).toBeGreaterThan(0);
    for (const btn of buttons) expect(btn.disabled).toBe(false);
  });
});

describe("what-if preview", () => {
  const hypo: WhatifResult = {
    session_id: "s1",
    relation: [1, 2],
    feature: 4,
    marginals: [
      { u: 0, v: 1, p: [0.1, 0.2, 0.3, 0.4] },
      { u: 0, v: 2, p: [0.4, 0.3, 0.2, 0.1] },
      { u: 1, v: 2, p: [0.05, 0.05, 0.05, 0.85] },
    ],
    expected_bic: 4470.125,
    expected_shd: null,
    ess: 123.5,
  };

  it("overlays the hypothetical without touching committed state", async () => {
    const client = stubClient(snapFixture());
    client.whatif.mockResolvedValueOnce(hypo);
    const app = boot(client);
    await app.openSession();

    const committedBefore = document.getElementById("graph-canvas")!.innerHTML;
    const snapBefore = app.snapshot();
    (document.getElementById("whatif-pair") as HTMLSelectElement).value = "1,2";
    (document.getElementById("whatif-feature") as HTMLSelectElement).value = "4";
    await app.whatif();

    expect(client.whatif).toHaveBeenCalledWith("s1", [1, 2], 4);
    expect(document.getElementById("whatif-result")!.textContent).toContain("V2 ↔ V3");
    expect(document.getElementById("whatif-result")!.getAttribute("data-bic")).toBe(
      "4470.125",
    );
    const hypoCells = document.querySelectorAll("#overlay-table .overlay-hypo");
    expect(hypoCells).toHaveLength(3);
    expect(hypoCells[2].textContent).toBe("0.05 / 0.05 / 0.05 / 0.85");

    // committed view is untouched: same DOM, same snapshot, no answer call
    expect(document.getElementById("graph-canvas")!.innerHTML).toBe(committedBefore);
    expect(app.snapshot()).toBe(snapBefore);
    expect(client.answer).not.toHaveBeenCalled();
    expect(client.trace).toHaveBeenCalledTimes(1);
  });

  it("clears the overlay when an answer commits", async () => {
    const client = stubClient(snapFixture());
    client.whatif.mockResolvedValueOnce(hypo);
    client.answer.mockResolvedValueOnce(
      snapFixture({ history: [{ step: 1, u: 0, v: 1, feature: 2 }] }),
    );
    const app = boot(client);
    await app.openSession();
    await app.whatif();
    expect(document.querySelectorAll("#overlay-table tr").length).toBeGreaterThan(0);

    await app.answer(2);
    expect(document.getElementById("overlay-table")!.textContent).toBe("");
    expect(document.getElementById("whatif-result")!.textContent).toBe("");
  });

  it("drops responses that arrive after a clear", async () => {
    const client = stubClient(snapFixture());
    const gate = deferred<WhatifResult>();
    client.whatif.mockReturnValueOnce(gate.promise);
    const app = boot(client);
    await app.openSession();

    const pending = app.whatif();
    app.clearWhatif();
    gate.resolve(hypo);
    await pending;
    expect(document.getElementById("overlay-table")!.textContent).toBe("");
  });
});

describe("training jobs", () => {
  it("polls once a second until the job finishes, then loads the checkpoint", async () => {
    vi.useFakeTimers();
    const client = stubClient(snapFixture());
    client.jobStatus
      .mockResolvedValueOnce({ status: "running", epoch: 3, mean_loss: 0.41 })
      .mockResolvedValueOnce({ status: "done", checkpoint_id: "j1" });
    client.checkpoints.mockResolvedValue({
      checkpoints: [
        {
          checkpoint_id: "j1",
          dataset_id: "d1",
          reward_spec: { mu: 0, sigma: 1, temperature: 1 },
          epochs_run: 8,
          stopped_early: true,
        },
      ],
    });
    const app = boot(client);

    (document.getElementById("dataset-csv") as HTMLTextAreaElement).value =
      "V1,V2\n0.1,0.2\n";
    await app.uploadDataset();
    expect(document.getElementById("dataset-status")!.textContent).toContain("d1");
    expect(
      (document.getElementById("train-btn") as HTMLButtonElement).disabled,
    ).toBe(false);

    await app.startTraining();
    expect(client.jobStatus).not.toHaveBeenCalled();

    await vi.advanceTimersByTimeAsync(1000);
    await flush();
    expect(client.jobStatus).toHaveBeenCalledTimes(1);
    expect(document.getElementById("job-status")!.textContent).toContain("epoch 3");

    await vi.advanceTimersByTimeAsync(1000);
    await flush();
    expect(document.getElementById("job-status")!.textContent).toContain("done");
    expect(
      (document.getElementById("checkpoint-pick") as HTMLSelectElement).value,
    ).toBe("j1");

    // the loop must stop once the job is terminal
    await vi.advanceTimersByTimeAsync(5000);
    await flush();
    expect(client.jobStatus).toHaveBeenCalledTimes(2);
  });

  it("stops polling and reports the reason when the job fails", async () => {
    vi.useFakeTimers();
    const client = stubClient(snapFixture());
    client.jobStatus.mockResolvedValue({
      status: "failed",
      reason: "needs at least 3 rows",
    });
    const app = boot(client);
    (document.getElementById("dataset-csv") as HTMLTextAreaElement).value = "V1,V2\n";
    await app.uploadDataset();
    await app.startTraining();

    await vi.advanceTimersByTimeAsync(1000);
    await flush();
    expect(document.getElementById("job-status")!.textContent).toContain(
      "needs at least 3 rows",
    );
    await vi.advanceTimersByTimeAsync(4000);
    await flush();
    expect(client.jobStatus).toHaveBeenCalledTimes(1);
  });
});
