import { describe, expect, it } from "vitest";

import { loadAdminView, renderAdminHtml, statsRows } from "../src/admin.js";
import { Choice, StudyStats } from "../src/api.js";
import { binomialP, FakeStudyService } from "./fake_service.js";

async function completedService(): Promise<FakeStudyService> {
  const service = new FakeStudyService();
  const flip: Record<Choice, Choice> = { real: "simulated", simulated: "real" };
  for (const [rater, wrongEvery] of [
    ["r1", 0],
    ["r2", 3],
    ["r3", 2],
  ] as Array<[string, number]>) {
    service.items.forEach((item, i) => {
      const correct = wrongEvery === 0 || i % wrongEvery !== 0;
      void service.submitResponse("s1", rater, item.item_id, correct ? item.truth : flip[item.truth]);
    });
  }
  return service;
}

describe("admin stats view", () => {
  it("renders one row per rater plus a consensus row, verbatim", async () => {
    const service = await completedService();
    service.finalized = true;
    const state = await loadAdminView(service, "s1", "sesame");
    expect(state.kind).toBe("stats");
    if (state.kind !== "stats") return;
    expect(state.rows.length).toBe(4);
    expect(state.rows.map((r) => r.label)).toEqual(["r1", "r2", "r3", "consensus"]);
    // values come straight from the payload, no client-side recomputation
    const payload = state.stats;
    payload.raters.forEach((r, i) => {
      expect(state.rows[i].accuracyPct).toBe(`${r.accuracy_pct}%`);
      expect(state.rows[i].nCorrect).toBe(r.n_correct);
    });
    const html = renderAdminHtml(state);
    expect(html).toContain("<table>");
    expect(html).toContain("consensus");
    expect(html).toContain("raw-json");
  });

  it("admin stats equal a recomputation from the raw response log", async () => {
    const service = await completedService();
    service.finalized = true;
    const stats = await service.stats("s1", "sesame");

    // independent recomputation from the raw log
    const raters = [...new Set(service.log.map((r) => r.rater_id))].sort();
    for (const row of stats.raters) {
      const mine = service.log.filter((r) => r.rater_id === row.rater_id);
      const k = mine.filter((r) => r.choice === service.truthOf(r.item_id)).length;
      expect(row.n_correct).toBe(k);
      expect(row.accuracy).toBeCloseTo(k / 30, 12);
      expect(row.accuracy_pct).toBe(Math.round((100 * k) / 30));
      expect(row.p_value).toBeCloseTo(binomialP(k, 30), 12);
    }
    let consensusCorrect = 0;
    for (const item of service.items) {
      const votes = service.log
        .filter((r) => r.item_id === item.item_id)
        .map((r) => r.choice);
      expect(votes.length).toBe(raters.length);
      const real = votes.filter((v) => v === "real").length;
      const majority = real > votes.length / 2 ? "real" : "simulated";
      if (majority === item.truth) consensusCorrect += 1;
    }
    expect(stats.consensus!.n_correct).toBe(consensusCorrect);
    expect(stats.consensus!.p_value).toBeCloseTo(binomialP(consensusCorrect, 30), 12);
  });

  it("shows an in-progress placeholder before finalization", async () => {
    const service = await completedService(); // answered but not finalized
    const state = await loadAdminView(service, "s1", "sesame");
    expect(state.kind).toBe("in_progress");
    expect(renderAdminHtml(state)).toContain("in progress");
  });

  it("shows an in-progress placeholder while responses are incomplete", async () => {
    const service = new FakeStudyService();
    await service.submitResponse("s1", "r1", service.items[0].item_id, "real");
    const state = await loadAdminView(service, "s1", "sesame");
    expect(state.kind).toBe("in_progress");
  });

  it("denies access without the admin token", async () => {
    const service = await completedService();
    const state = await loadAdminView(service, "s1", "wrong-token");
    expect(state.kind).toBe("access_denied");
    expect(renderAdminHtml(state)).toContain("Access denied");
  });

  it("escapes html in rendered values", () => {
    const stats: StudyStats = {
      session_id: "s",
      n_items: 2,
      complete: true,
      finalized: true,
      raters: [
        {
          rater_id: "<script>x</script>",
          n_answered: 2,
          n_correct: 1,
          accuracy: 0.5,
          accuracy_pct: 50,
          p_value: 1.0,
        },
      ],
      consensus: null,
      consensus_notice: "consensus omitted: even rater count",
    };
    const html = renderAdminHtml({ kind: "stats", stats, rows: statsRows(stats) });
    expect(html).not.toContain("<script>x");
    expect(html).toContain("&lt;script&gt;");
  });
});
