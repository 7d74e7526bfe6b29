// In-memory stand-in for the study service with the same visible semantics:
// 15 real + 15 simulated items in seeded order, append-only response log,
// duplicate-response conflicts, finalization, and stats derived from the log.

import { ApiError, Choice, NextItem, StudyApi, StudyStats } from "../src/api.js";

export interface RawResponse {
  rater_id: string;
  item_id: string;
  choice: Choice;
  timestamp: number;
}

interface Item {
  item_id: string;
  truth: Choice;
}

function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function comb(n: number, k: number): number {
  let out = 1;
  for (let i = 0; i < k; i++) {
    out = (out * (n - i)) / (i + 1);
  }
  return out;
}

/** Exact two-sided binomial test against chance 0.5 (same rule as the service). */
export function binomialP(k: number, n: number): number {
  if (n === 0) return 1.0;
  const dev = Math.abs(2 * k - n);
  let tail = 0;
  for (let j = 0; j <= n; j++) {
    if (Math.abs(2 * j - n) >= dev) {
      tail += comb(n, j);
    }
  }
  return tail / Math.pow(2, n);
}

export class FakeStudyService implements StudyApi {
  readonly items: Item[] = [];
  readonly log: RawResponse[] = [];
  finalized = false;
  readonly adminToken: string;
  nextCalls = 0;

  constructor(sessionId = "s1", nEach = 15, seed = 1, adminToken = "sesame") {
    this.adminToken = adminToken;
    const truths: Choice[] = [];
    for (let i = 0; i < nEach; i++) truths.push("real");
    for (let i = 0; i < nEach; i++) truths.push("simulated");
    const rand = mulberry32(seed);
    for (let i = truths.length - 1; i > 0; i--) {
      const j = Math.floor(rand() * (i + 1));
      [truths[i], truths[j]] = [truths[j], truths[i]];
    }
    truths.forEach((truth, i) => {
      this.items.push({ item_id: `${sessionId}.${String(i).padStart(3, "0")}`, truth });
    });
  }

  truthOf(itemId: string): Choice {
    const item = this.items.find((it) => it.item_id === itemId);
    if (!item) throw new Error(`unknown item ${itemId}`);
    return item.truth;
  }

  private answeredBy(raterId: string): Set<string> {
    return new Set(this.log.filter((r) => r.rater_id === raterId).map((r) => r.item_id));
  }

  async nextItem(_sessionId: string, raterId: string): Promise<NextItem> {
    this.nextCalls += 1;
    const answered = this.answeredBy(raterId);
    const progress = { answered: answered.size, total: this.items.length };
    for (const item of this.items) {
      if (!answered.has(item.item_id)) {
        // NOTE: truth never appears in this payload, matching the service.
        return {
          done: false,
          item_id: item.item_id,
          image_url: `/items/${item.item_id}/image.png`,
          ...progress,
        };
      }
    }
    return { done: true, ...progress };
  }

  async submitResponse(
    _sessionId: string,
    raterId: string,
    itemId: string,
    choice: Choice,
  ): Promise<void> {
    if (this.finalized) {
      throw new ApiError(409, "finalized", "session is finalized");
    }
    if (!this.items.some((it) => it.item_id === itemId)) {
      throw new ApiError(404, "not_found", `unknown item ${itemId}`);
    }
    if (this.answeredBy(raterId).has(itemId)) {
      throw new ApiError(409, "conflict", `rater ${raterId} already answered ${itemId}`);
    }
    this.log.push({ rater_id: raterId, item_id: itemId, choice, timestamp: Date.now() });
  }

  async stats(_sessionId: string, adminToken: string): Promise<StudyStats> {
    if (adminToken !== this.adminToken) {
      throw new ApiError(403, "forbidden", "admin token required");
    }
    const raters = [...new Set(this.log.map((r) => r.rater_id))].sort();
    const complete =
      raters.length > 0 && raters.every((r) => this.answeredBy(r).size === this.items.length);
    if (!complete) {
      throw new ApiError(409, "incomplete", "stats need every rater to answer every item");
    }
    const raterRows = raters.map((raterId) => {
      const mine = this.log.filter((r) => r.rater_id === raterId);
      const k = mine.filter((r) => r.choice === this.truthOf(r.item_id)).length;
      const n = mine.length;
      return {
        rater_id: raterId,
        n_answered: n,
        n_correct: k,
        accuracy: k / n,
        accuracy_pct: Math.round((100 * k) / n),
        p_value: binomialP(k, n),
      };
    });
    let consensus = null;
    if (raters.length % 2 === 1) {
      let k = 0;
      for (const item of this.items) {
        const votes = this.log.filter((r) => r.item_id === item.item_id).map((r) => r.choice);
        const realVotes = votes.filter((v) => v === "real").length;
        const majority: Choice = realVotes > votes.length / 2 ? "real" : "simulated";
        if (majority === item.truth) k += 1;
      }
      const n = this.items.length;
      consensus = {
        n_correct: k,
        accuracy: k / n,
        accuracy_pct: Math.round((100 * k) / n),
        p_value: binomialP(k, n),
      };
    }
    return {
      session_id: "s1",
      n_items: this.items.length,
      complete,
      finalized: this.finalized,
      raters: raterRows,
      consensus,
      consensus_notice: consensus === null ? "consensus omitted: even rater count" : null,
    };
  }
}

/** Wrap an API so its next N calls fail with a (non-HTTP) network error. */
export function flakyApi(inner: StudyApi, failures: number): StudyApi {
  let remaining = failures;
  const maybeFail = () => {
    if (remaining > 0) {
      remaining -= 1;
      throw new TypeError("network down");
    }
  };
  return {
    async nextItem(sessionId, raterId) {
      maybeFail();
      return inner.nextItem(sessionId, raterId);
    },
    async submitResponse(sessionId, raterId, itemId, choice) {
      maybeFail();
      return inner.submitResponse(sessionId, raterId, itemId, choice);
    },
    async stats(sessionId, adminToken) {
      maybeFail();
      return inner.stats(sessionId, adminToken);
    },
  };
}
