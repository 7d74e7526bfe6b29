// Entry point for the rater page. Session and rater identity come from the
// query string: /app/?session=<id>&rater=<id>.

import { HttpStudyApi } from "./api.js";
import { RatingFlow } from "./flow.js";
import { DomRaterView } from "./view.js";
import { HttpStudyApi as AdminApi } from "./api.js";
import { loadAdminView, renderAdminHtml } from "./admin.js";

export function startRaterPage(doc: Document, win: Window): void {
  const params = new URLSearchParams(win.location.search);
  const sessionId = params.get("session");
  const raterId = params.get("rater");
  const status = doc.getElementById("status")!;
  if (!sessionId || !raterId) {
    status.textContent = "missing ?session= and ?rater= query parameters";
    return;
  }
  const view = new DomRaterView(doc);
  const flow = new RatingFlow(new HttpStudyApi(""), view, sessionId, raterId);
  view.onChoice((choice) => {
    void flow.submit(choice);
  });
  void flow.start();
}

export async function startAdminPage(doc: Document, win: Window): Promise<void> {
  const params = new URLSearchParams(win.location.search);
  const sessionId = params.get("session");
  const token = params.get("token") ?? "";
  const container = doc.getElementById("stats")!;
  if (!sessionId) {
    container.innerHTML = "<p class='error'>missing ?session= query parameter</p>";
    return;
  }
  const state = await loadAdminView(new AdminApi(""), sessionId, token);
  container.innerHTML = renderAdminHtml(state);
  if (state.kind === "stats") {
    const link = doc.getElementById("raw-json") as HTMLAnchorElement | null;
    if (link) {
      const blob = new Blob([JSON.stringify(state.stats, null, 2)], { type: "application/json" });
      link.href = URL.createObjectURL(blob);
    }
  }
}

declare global {
  interface Window {
    scarganStudy: { startRaterPage: typeof startRaterPage; startAdminPage: typeof startAdminPage };
  }
}

if (typeof window !== "undefined" && typeof document !== "undefined") {
  window.scarganStudy = { startRaterPage, startAdminPage };
  const page = document.body?.dataset?.page;
  if (page === "rater") {
    startRaterPage(document, window);
  } else if (page === "admin") {
    void startAdminPage(document, window);
  }
}
