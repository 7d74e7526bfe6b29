import { describe, expect, it } from "vitest";

import { Choice } from "../src/api.js";
import { RatingFlow, RaterView } from "../src/flow.js";
import { FakeStudyService, flakyApi } from "./fake_service.js";

class RecordingView implements RaterView {
  items: string[] = [];
  progress: Array<[number, number]> = [];
  statuses: string[] = [];
  completed = false;
  enabled = false;
  enableHistory: boolean[] = [];

  showItem(itemId: string): void {
    this.items.push(itemId);
  }
  showProgress(answered: number, total: number): void {
    this.progress.push([answered, total]);
  }
  showCompletion(): void {
    this.completed = true;
  }
  showStatus(message: string): void {
    this.statuses.push(message);
  }
  setChoicesEnabled(enabled: boolean): void {
    this.enabled = enabled;
    this.enableHistory.push(enabled);
  }
}

const instantSleep = async () => {};

describe("rating flow", () => {
  it("answers all 30 items exactly once and completes", async () => {
    const service = new FakeStudyService();
    const view = new RecordingView();
    const flow = new RatingFlow(service, view, "s1", "r1");
    await flow.start();
    let guard = 0;
    while (!flow.done && guard++ < 100) {
      const choice: Choice = guard % 2 === 0 ? "real" : "simulated";
      await flow.submit(choice);
    }
    expect(flow.done).toBe(true);
    expect(view.completed).toBe(true);
    expect(service.log.length).toBe(30);
    expect(new Set(service.log.map((r) => r.item_id)).size).toBe(30);
    // progress rendered 0/30 .. 30/30 in order
    expect(view.progress[0]).toEqual([0, 30]);
    expect(view.progress[view.progress.length - 1]).toEqual([30, 30]);
    expect(view.progress.map(([a]) => a)).toEqual([...Array(31).keys()]);
    // one displayed item per response
    expect(view.items.length).toBe(30);
  });

  it("ignores duplicate clicks while a submission is in flight", async () => {
    const service = new FakeStudyService();
    const view = new RecordingView();
    const flow = new RatingFlow(service, view, "s1", "r1");
    await flow.start();
    const first = flow.itemOnDisplay!;
    const a = flow.submit("real");
    const b = flow.submit("simulated"); // double click: dropped client-side
    await Promise.all([a, b]);
    expect(service.log.filter((r) => r.item_id === first).length).toBe(1);
    expect(service.log[0].choice).toBe("real");
  });

  it("recovers from a server-side conflict by moving to the next item", async () => {
    const service = new FakeStudyService();
    const tabA = new RatingFlow(service, new RecordingView(), "s1", "r1");
    const viewB = new RecordingView();
    const tabB = new RatingFlow(service, viewB, "s1", "r1");
    await tabA.start();
    await tabB.start();
    const contested = tabB.itemOnDisplay!;
    expect(tabA.itemOnDisplay).toBe(contested);
    await tabA.submit("real");
    await tabB.submit("simulated"); // conflict: already answered by the same rater
    expect(service.log.filter((r) => r.item_id === contested).length).toBe(1);
    expect(service.log.find((r) => r.item_id === contested)!.choice).toBe("real");
    expect(viewB.statuses.some((s) => s.includes("already answered"))).toBe(true);
    expect(tabB.itemOnDisplay).not.toBe(contested);
  });

  it("retries network failures with backoff and visible status", async () => {
    const service = new FakeStudyService();
    const view = new RecordingView();
    const flow = new RatingFlow(flakyApi(service, 2), view, "s1", "r1", {
      retryDelaysMs: [1, 2, 4],
      sleep: instantSleep,
    });
    await flow.start(); // first two nextItem calls fail, third succeeds
    expect(view.statuses.filter((s) => s.includes("retrying")).length).toBe(2);
    expect(flow.itemOnDisplay).not.toBeNull();
  });

  it("gives up after exhausting retries", async () => {
    const service = new FakeStudyService();
    const view = new RecordingView();
    const flow = new RatingFlow(flakyApi(service, 10), view, "s1", "r1", {
      retryDelaysMs: [1],
      sleep: instantSleep,
    });
    await expect(flow.start()).rejects.toThrow("network down");
    expect(view.statuses.some((s) => s.includes("giving up"))).toBe(true);
  });

  it("disables choices while submitting and after completion", async () => {
    const service = new FakeStudyService("s1", 1); // 2 items only
    const view = new RecordingView();
    const flow = new RatingFlow(service, view, "s1", "r1");
    await flow.start();
    expect(view.enabled).toBe(true);
    await flow.submit("real");
    expect(view.enabled).toBe(true); // re-enabled for the next item
    await flow.submit("real");
    expect(flow.done).toBe(true);
    expect(view.enabled).toBe(false);
    const before = service.log.length;
    await flow.submit("simulated"); // no-op after completion
    expect(service.log.length).toBe(before);
  });

  it("never sees truth in rater payloads", async () => {
    const service = new FakeStudyService();
    const next = await service.nextItem("s1", "r1");
    expect(Object.keys(next).sort()).toEqual(
      ["answered", "done", "image_url", "item_id", "total"].sort(),
    );
  });
});
