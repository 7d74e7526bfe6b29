// Admin statistics view: one row per rater plus a consensus row. Values come
// verbatim from the service payload; nothing is recomputed client-side.

import { ApiError, StudyApi, StudyStats } from "./api.js";

export type AdminViewState =
  | { kind: "stats"; stats: StudyStats; rows: StatsRow[] }
  | { kind: "in_progress"; message: string }
  | { kind: "access_denied"; message: string };

export interface StatsRow {
  label: string;
  nCorrect: number | null;
  accuracyPct: string;
  pValue: string;
}

export function statsRows(stats: StudyStats): StatsRow[] {
  const rows: StatsRow[] = stats.raters.map((r) => ({
    label: r.rater_id,
    nCorrect: r.n_correct,
    accuracyPct: `${r.accuracy_pct}%`,
    pValue: formatP(r.p_value),
  }));
  if (stats.consensus) {
    rows.push({
      label: "consensus",
      nCorrect: stats.consensus.n_correct,
      accuracyPct: `${stats.consensus.accuracy_pct}%`,
      pValue: formatP(stats.consensus.p_value),
    });
  }
  return rows;
}

export function formatP(p: number): string {
  return p < 0.001 ? p.toExponential(2) : `p=${p.toFixed(3)}`;
}

export async function loadAdminView(
  api: StudyApi,
  sessionId: string,
  adminToken: string,
): Promise<AdminViewState> {
  try {
    const stats = await api.stats(sessionId, adminToken);
    if (!stats.finalized) {
      return { kind: "in_progress", message: "session in progress" };
    }
    return { kind: "stats", stats, rows: statsRows(stats) };
  } catch (err) {
    if (err instanceof ApiError && err.status === 403) {
      return { kind: "access_denied", message: err.message };
    }
    if (err instanceof ApiError && err.status === 409) {
      return { kind: "in_progress", message: "session in progress" };
    }
    throw err;
  }
}

export function renderAdminHtml(state: AdminViewState): string {
  if (state.kind === "access_denied") {
    return `<p class="error">Access denied: ${escapeHtml(state.message)}</p>`;
  }
  if (state.kind === "in_progress") {
    return `<p class="placeholder">${escapeHtml(state.message)}</p>`;
  }
  const body = state.rows
    .map(
      (r) =>
        `<tr><td>${escapeHtml(r.label)}</td><td>${r.nCorrect} / ${state.stats.n_items}</td>` +
        `<td>${escapeHtml(r.accuracyPct)}</td><td>${escapeHtml(r.pValue)}</td></tr>`,
    )
    .join("");
  const notice = state.stats.consensus_notice
    ? `<p class="notice">${escapeHtml(state.stats.consensus_notice)}</p>`
    : "";
  return (
    `<table><thead><tr><th>rater</th><th>correct</th><th>accuracy</th><th>p-value</th></tr></thead>` +
    `<tbody>${body}</tbody></table>${notice}` +
    `<p><a id="raw-json" download="stats.json">Download raw JSON</a></p>`
  );
}

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}
