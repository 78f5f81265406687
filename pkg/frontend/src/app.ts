/** Review application: a queue of pending dialogues and a detail view with
 * approve/reject controls. All gate numbers are rendered verbatim from the
 * server; the client never recomputes them, and holds no verdict state of
 * its own (a reload reproduces server state exactly).
 */

import { ApiError, ReviewApi } from "./api.js";
import type { DialogueDetail, PendingSummary, Verdict } from "./types.js";
import { verdictProblem } from "./validation.js";

interface AppOptions {
  reviewer: string;
}

export class ReviewApp {
  private pending: PendingSummary[] = [];
  private detail: DialogueDetail | null = null;
  private submitting = false;
  private draftReason = "";
  private banner: { kind: "error" | "info"; text: string; retry?: () => void } | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ReviewApi,
    private readonly options: AppOptions,
  ) {
    this.onKeyDown = this.onKeyDown.bind(this);
  }

  async start(): Promise<void> {
    this.root.ownerDocument.addEventListener("keydown", this.onKeyDown);
    await this.refreshQueue();
  }

  stop(): void {
    this.root.ownerDocument.removeEventListener("keydown", this.onKeyDown);
  }

  // ----- data loading ------------------------------------------------------

  async refreshQueue(): Promise<void> {
    try {
      this.pending = await this.api.fetchPending();
      this.banner = null;
    } catch (error) {
      this.banner = {
        kind: "error",
        text: `Could not load the review queue: ${describe(error)}`,
        retry: () => void this.refreshQueue(),
      };
    }
    this.render();
  }

  async openDialogue(id: string): Promise<void> {
    try {
      this.detail = await this.api.fetchDialogue(id);
      this.draftReason = "";
      this.banner = null;
    } catch (error) {
      if (error instanceof ApiError && error.status === 404) {
        this.detail = null;
        this.banner = { kind: "error", text: `Dialogue ${id} was not found.` };
      } else {
        this.banner = {
          kind: "error",
          text: `Could not load ${id}: ${describe(error)}`,
          retry: () => void this.openDialogue(id),
        };
      }
    }
    this.render();
  }

  closeDetail(): Promise<void> {
    this.detail = null;
    this.draftReason = "";
    return this.refreshQueue();
  }

  // ----- verdict submission ------------------------------------------------

  async submit(verdict: Verdict): Promise<void> {
    if (!this.detail || this.submitting) return;
    const reason = this.draftReason;
    const problem = verdictProblem(verdict, reason);
    if (problem) {
      this.banner = { kind: "error", text: problem };
      this.render();
      return;
    }
    this.submitting = true;
    this.render();
    const id = this.detail.id;
    try {
      await this.api.submitVerdict(id, verdict, this.options.reviewer, reason.trim() || undefined);
      this.submitting = false;
      this.detail = null;
      this.draftReason = "";
      this.banner = { kind: "info", text: `${id} ${verdict}.` };
      await this.refreshQueue();
    } catch (error) {
      this.submitting = false;
      if (error instanceof ApiError && error.status === 409) {
        // decided elsewhere: refresh to server state, then surface it
        await this.openDialogue(id);
        await this.refreshQueue();
        this.banner = {
          kind: "error",
          text: `${id} was already decided by another reviewer.`,
        };
        this.render();
        return;
      }
      // network or server trouble: keep the draft so nothing is lost
      this.banner = {
        kind: "error",
        text: `Submitting the verdict failed: ${describe(error)}. Your draft is kept.`,
        retry: () => void this.submit(verdict),
      };
      this.render();
    }
  }

  private onKeyDown(event: KeyboardEvent): void {
    if (!this.detail || this.submitting) return;
    const target = event.target as HTMLElement | null;
    if (target && (target.tagName === "TEXTAREA" || target.tagName === "INPUT")) return;
    if (event.key === "a") void this.submit("approved");
    if (event.key === "r") void this.submit("rejected");
  }

  // ----- rendering ----------------------------------------------------------

  render(): void {
    this.root.textContent = "";
    if (this.banner) {
      this.root.appendChild(this.renderBanner());
    }
    this.root.appendChild(this.detail ? this.renderDetail(this.detail) : this.renderQueue());
  }

  private renderBanner(): HTMLElement {
    const banner = el("div", `banner banner-${this.banner!.kind}`);
    banner.appendChild(el("span", "", this.banner!.text));
    if (this.banner!.retry) {
      const retry = el("button", "retry-button", "Retry") as HTMLButtonElement;
      retry.addEventListener("click", () => this.banner!.retry!());
      banner.appendChild(retry);
    }
    return banner;
  }

  private renderQueue(): HTMLElement {
    const section = el("section", "queue");
    section.appendChild(el("h1", "", "Pending review"));
    if (this.pending.length === 0) {
      section.appendChild(
        el("p", "empty-state", "Nothing waiting for review. All caught up."),
      );
      return section;
    }
    const list = el("ul", "card-list");
    for (const row of this.pending) {
      const item = el("li", "card");
      const button = el("button", "card-button") as HTMLButtonElement;
      button.dataset.entryId = row.entry_id;
      button.addEventListener("click", () => void this.openDialogue(row.entry_id));
      button.appendChild(el("span", "card-id", row.entry_id));
      button.appendChild(el("span", "badge subset-badge", row.subset));
      button.appendChild(el("span", "card-meta", `${row.turn_count} turns`));
      button.appendChild(el("span", "card-meta", `max WER ${row.max_wer}`));
      button.appendChild(el("span", "card-meta", `min cosine ${row.min_cosine}`));
      button.appendChild(el("span", "badge attempts-badge", `${row.attempts_used} attempts`));
      item.appendChild(button);
      list.appendChild(item);
    }
    section.appendChild(list);
    return section;
  }

  private renderDetail(detail: DialogueDetail): HTMLElement {
    const section = el("section", "detail");
    const back = el("button", "back-button", "Back to queue") as HTMLButtonElement;
    back.addEventListener("click", () => void this.closeDetail());
    section.appendChild(back);

    const header = el("header", "detail-header");
    header.appendChild(el("h1", "", detail.id));
    header.appendChild(el("span", "badge subset-badge", detail.subset));
    header.appendChild(
      el("span", "badge attempts-badge", `${detail.gate.attempts_used} attempts`),
    );
    section.appendChild(header);

    const audioWrap = el("div", "audio");
    const audio = this.root.ownerDocument.createElement("audio");
    audio.controls = true;
    audio.src = this.api.audioUrl(detail.id);
    const audioProblem = el("p", "audio-error", "Audio could not be loaded.");
    audioProblem.setAttribute("hidden", "");
    audio.addEventListener("error", () => audioProblem.removeAttribute("hidden"));
    audioWrap.appendChild(audio);
    audioWrap.appendChild(audioProblem);
    section.appendChild(audioWrap);

    const gate = el("dl", "gate-summary");
    appendPair(gate, "Machine verdict", detail.gate.machine_verdict);
    appendPair(gate, "Min speaker cosine", String(detail.gate.speaker_min_cosine));
    appendPair(gate, "Per-utterance WER", detail.gate.per_utterance_wer.join(", "));
    appendPair(gate, "Track duration (s)", String(detail.track_duration_s));
    if (detail.mix_plan) {
      appendPair(gate, "Mix method", detail.mix_plan.method);
    }
    section.appendChild(gate);

    const turns = el("ol", "turns");
    for (const turn of detail.turns) {
      const row = el("li", `turn turn-${turn.role}`);
      row.appendChild(el("span", "badge role-badge", turn.role));
      row.appendChild(el("span", "badge emotion-chip", turn.style.emotion));
      row.appendChild(
        el(
          "span",
          "badge style-chip",
          `${turn.style.gender} / ${turn.style.pitch} / ${turn.style.speed}`,
        ),
      );
      row.appendChild(el("p", "transcript", turn.transcript));
      row.appendChild(el("span", "turn-wer", `WER ${turn.wer}`));
      turns.appendChild(row);
    }
    section.appendChild(turns);

    const controls = el("div", "verdict-controls");
    const reason = this.root.ownerDocument.createElement("textarea");
    reason.className = "reason-input";
    reason.placeholder = "Reason (required to reject)";
    reason.value = this.draftReason;
    reason.addEventListener("input", () => {
      this.draftReason = reason.value;
    });
    controls.appendChild(reason);

    const approve = el("button", "approve-button", "Approve (a)") as HTMLButtonElement;
    approve.disabled = this.submitting;
    approve.addEventListener("click", () => void this.submit("approved"));
    const reject = el("button", "reject-button", "Reject (r)") as HTMLButtonElement;
    reject.disabled = this.submitting;
    reject.addEventListener("click", () => void this.submit("rejected"));
    controls.appendChild(approve);
    controls.appendChild(reject);
    section.appendChild(controls);
    return section;
  }
}

function el(tag: string, className: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function appendPair(list: HTMLElement, label: string, value: string): void {
  list.appendChild(el("dt", "", label));
  list.appendChild(el("dd", "", value));
}

function describe(error: unknown): string {
  if (error instanceof ApiError) return `${error.code}: ${error.message}`;
  if (error instanceof Error) return error.message;
  return String(error);
}
