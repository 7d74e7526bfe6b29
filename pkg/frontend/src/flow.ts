// Rating flow state machine: fetch-next -> display -> submit, looping until
// the service reports no remaining items. Framework-free so it can run
// against any view implementation (DOM or test double).

import { ApiError, Choice, StudyApi } from "./api.js";

export interface RaterView {
  showItem(itemId: string, imageUrl: string): void;
  showProgress(answered: number, total: number): void;
  showCompletion(): void;
  showStatus(message: string): void;
  setChoicesEnabled(enabled: boolean): void;
}

export interface FlowOptions {
  retryDelaysMs?: number[];
  sleep?: (ms: number) => Promise<void>;
}

const DEFAULT_RETRY_DELAYS = [500, 1000, 2000, 4000];

function defaultSleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export class RatingFlow {
  private currentItemId: string | null = null;
  private submitting = false;
  private finished = false;
  private retryDelays: number[];
  private sleep: (ms: number) => Promise<void>;

  constructor(
    private api: StudyApi,
    private view: RaterView,
    private sessionId: string,
    private raterId: string,
    options: FlowOptions = {},
  ) {
    this.retryDelays = options.retryDelaysMs ?? DEFAULT_RETRY_DELAYS;
    this.sleep = options.sleep ?? defaultSleep;
  }

  get done(): boolean {
    return this.finished;
  }

  get itemOnDisplay(): string | null {
    return this.currentItemId;
  }

  async start(): Promise<void> {
    await this.advance();
  }

  /** Fetch the next unanswered item (retrying on network failure) and show it. */
  private async advance(): Promise<void> {
    this.currentItemId = null;
    this.view.setChoicesEnabled(false);
    const next = await this.withRetries(() => this.api.nextItem(this.sessionId, this.raterId));
    this.view.showProgress(next.answered, next.total);
    if (next.done) {
      this.finished = true;
      this.view.showCompletion();
      return;
    }
    this.currentItemId = next.item_id!;
    this.view.showItem(next.item_id!, next.image_url!);
    this.view.setChoicesEnabled(true);
  }

  /**
   * Submit the forced choice for the item on display. Duplicate clicks while
   * a submission is in flight are dropped; a server-side conflict (the item
   * was already answered) is recovered by skipping to the next item.
   */
  async submit(choice: Choice): Promise<void> {
    if (this.finished || this.submitting || this.currentItemId === null) {
      return;
    }
    const itemId = this.currentItemId;
    this.submitting = true;
    this.view.setChoicesEnabled(false);
    try {
      await this.withRetries(() =>
        this.api.submitResponse(this.sessionId, this.raterId, itemId, choice),
      );
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.view.showStatus("already answered; moving on");
      } else {
        throw err;
      }
    } finally {
      this.submitting = false;
    }
    await this.advance();
  }

  /** Run a request, retrying transient network failures with backoff. */
  private async withRetries<T>(op: () => Promise<T>): Promise<T> {
    let attempt = 0;
    for (;;) {
      try {
        return await op();
      } catch (err) {
        // HTTP-level errors are the caller's business; only network failures retry.
        if (err instanceof ApiError) {
          throw err;
        }
        if (attempt >= this.retryDelays.length) {
          this.view.showStatus("network unreachable; giving up");
          throw err;
        }
        const delay = this.retryDelays[attempt];
        this.view.showStatus(`network error; retrying in ${delay} ms`);
        await this.sleep(delay);
        attempt += 1;
      }
    }
  }
}
