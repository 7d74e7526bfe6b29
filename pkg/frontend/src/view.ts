// DOM implementation of the rater view. Images render at native resolution
// scaled up with nearest-neighbour so pixel texture survives.

import { RaterView } from "./flow.js";

export class DomRaterView implements RaterView {
  private image: HTMLImageElement;
  private progress: HTMLElement;
  private status: HTMLElement;
  private completion: HTMLElement;
  private panel: HTMLElement;
  private buttons: HTMLButtonElement[];

  constructor(root: Document) {
    this.image = root.getElementById("slice-image") as HTMLImageElement;
    this.progress = root.getElementById("progress")!;
    this.status = root.getElementById("status")!;
    this.completion = root.getElementById("completion")!;
    this.panel = root.getElementById("rating-panel")!;
    this.buttons = Array.from(
      root.querySelectorAll<HTMLButtonElement>("button[data-choice]"),
    );
  }

  onChoice(handler: (choice: "real" | "simulated") => void): void {
    for (const button of this.buttons) {
      button.addEventListener("click", () => {
        handler(button.dataset.choice as "real" | "simulated");
      });
    }
  }

  showItem(itemId: string, imageUrl: string): void {
    this.image.src = imageUrl;
    this.image.dataset.itemId = itemId;
    this.status.textContent = "";
  }

  showProgress(answered: number, total: number): void {
    this.progress.textContent = `${answered} / ${total}`;
  }

  showCompletion(): void {
    this.panel.hidden = true;
    this.completion.hidden = false;
  }

  showStatus(message: string): void {
    this.status.textContent = message;
  }

  setChoicesEnabled(enabled: boolean): void {
    for (const button of this.buttons) {
      button.disabled = !enabled;
    }
  }
}
