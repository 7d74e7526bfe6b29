// @vitest-environment jsdom
//
// Scripted browser session: the real DOM view wired to the rating flow,
// driven by clicking the actual buttons until every item is answered.

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { beforeEach, describe, expect, it } from "vitest";

import { RatingFlow } from "../src/flow.js";
import { DomRaterView } from "../src/view.js";
import { binomialP, FakeStudyService } from "./fake_service.js";

const here = dirname(fileURLToPath(import.meta.url));
const pageHtml = readFileSync(join(here, "../public/index.html"), "utf-8");

function loadPage(): void {
  document.documentElement.innerHTML = pageHtml
    .replace(/^<!doctype html>/i, "")
    .replace(/<script[^>]*><\/script>/, "");
}

async function settle(): Promise<void> {
  // drain the microtask queue a few times so the fetch/submit chain finishes
  for (let i = 0; i < 10; i++) {
    await Promise.resolve();
  }
}

describe("scripted browser session", () => {
  beforeEach(loadPage);

  it("clicks through all 30 items exactly once with live progress", async () => {
    const service = new FakeStudyService();
    const view = new DomRaterView(document);
    const flow = new RatingFlow(service, view, "s1", "rater-7");
    view.onChoice((choice) => void flow.submit(choice));
    await flow.start();
    await settle();

    const progress = document.getElementById("progress")!;
    const realButton = document.querySelector<HTMLButtonElement>('button[data-choice="real"]')!;
    const simButton = document.querySelector<HTMLButtonElement>(
      'button[data-choice="simulated"]',
    )!;
    const image = document.getElementById("slice-image") as HTMLImageElement;

    expect(progress.textContent).toBe("0 / 30");
    expect(realButton.disabled).toBe(false);

    for (let i = 0; i < 30; i++) {
      expect(progress.textContent).toBe(`${i} / 30`);
      const shownItem = image.dataset.itemId!;
      expect(image.src).toContain(shownItem);
      (i % 2 === 0 ? realButton : simButton).click();
      await settle();
      // exactly one response recorded for the item that was on display
      expect(service.log.filter((r) => r.item_id === shownItem).length).toBe(1);
    }

    expect(progress.textContent).toBe("30 / 30");
    expect(flow.done).toBe(true);
    expect(document.getElementById("completion")!.hidden).toBe(false);
    expect(document.getElementById("rating-panel")!.hidden).toBe(true);
    expect(realButton.disabled).toBe(true);
    expect(service.log.length).toBe(30);
    expect(new Set(service.log.map((r) => r.item_id)).size).toBe(30);

    // no further fetches once complete
    const callsAfterDone = service.nextCalls;
    realButton.click();
    await settle();
    expect(service.nextCalls).toBe(callsAfterDone);
    expect(service.log.length).toBe(30);
  });

  it("rejects double-clicks and recovers: one response per displayed item", async () => {
    const service = new FakeStudyService();
    const view = new DomRaterView(document);
    const flow = new RatingFlow(service, view, "s1", "r1");
    view.onChoice((choice) => void flow.submit(choice));
    await flow.start();
    await settle();

    const realButton = document.querySelector<HTMLButtonElement>('button[data-choice="real"]')!;
    const image = document.getElementById("slice-image") as HTMLImageElement;
    const first = image.dataset.itemId!;

    realButton.click();
    realButton.click(); // double click before the first submit resolves
    await settle();
    expect(service.log.filter((r) => r.item_id === first).length).toBe(1);
    expect(image.dataset.itemId).not.toBe(first);
  });

  it("finished session yields stats that match a raw-log recomputation", async () => {
    const service = new FakeStudyService();
    const view = new DomRaterView(document);
    const flow = new RatingFlow(service, view, "s1", "solo");
    view.onChoice((choice) => void flow.submit(choice));
    await flow.start();
    await settle();

    const realButton = document.querySelector<HTMLButtonElement>('button[data-choice="real"]')!;
    for (let i = 0; i < 30; i++) {
      realButton.click();
      await settle();
    }
    service.finalized = true;
    const stats = await service.stats("s1", "sesame");
    const k = service.log.filter((r) => r.choice === service.truthOf(r.item_id)).length;
    expect(stats.raters[0].n_correct).toBe(k);
    expect(stats.raters[0].p_value).toBeCloseTo(binomialP(k, 30), 12);
  });
});
