"""Report generation: corpus evaluation against predictions, plus the
figures rendered alongside every delimited output.

Figures are written next to the JSON they illustrate (PNG, Agg backend), so
a report directory is self-contained and diffable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import MetricError
from .metrics import (
    HashTokenEmbedClient,
    MetricReport,
    TokenEmbedClient,
    bleu,
    embed_score,
    gpt_eval,
    meteor,
    rouge_l,
    weighted_f1,
)
from .pipeline import CorpusStats, corpus_stats
from .rng import derive_seed
from .schema import ManifestEntry
from .scriptgen import ChatClient

_FIG_STYLE = {"figure.figsize": (7.0, 4.2), "figure.dpi": 140, "axes.grid": True,
              "grid.alpha": 0.3}


# ---------------------------------------------------------------------------
# Prediction loading and corpus evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    """One system output: the final-turn response (and predicted emotion)."""

    entry_id: str
    response: str
    emotion: Optional[str] = None


def load_predictions(path: str | Path) -> dict[str, Prediction]:
    """Read predictions JSONL: {"id", "response", "emotion"?} per line."""
    out: dict[str, Prediction] = {}
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                pred = Prediction(
                    entry_id=row["id"], response=row["response"], emotion=row.get("emotion")
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise MetricError(f"predictions line {number}: {exc}") from exc
            out[pred.entry_id] = pred
    return out


@dataclass(frozen=True)
class DialogueScores:
    entry_id: str
    rouge_l: float
    meteor: float
    embed_score: float
    emotion_gold: str
    emotion_predicted: Optional[str]
    gpt_eval: Optional[float] = None

    def to_json_dict(self) -> dict:
        return {
            "id": self.entry_id,
            "rouge_l": self.rouge_l,
            "meteor": self.meteor,
            "embed_score": self.embed_score,
            "emotion_gold": self.emotion_gold,
            "emotion_predicted": self.emotion_predicted,
            "gpt_eval": self.gpt_eval,
        }


def _dialogue_context(entry: ManifestEntry) -> str:
    lines = [
        f"{t.role.value} ({t.style.emotion}): {t.content}" for t in entry.script.turns[:-1]
    ]
    return "\n".join(lines)


def evaluate_predictions(
    entries: Sequence[ManifestEntry],
    predictions: dict[str, Prediction],
    embed_client: Optional[TokenEmbedClient] = None,
    judge_client: Optional[ChatClient] = None,
    judge_seed: int = 0,
) -> tuple[MetricReport, list[DialogueScores]]:
    """Score predictions against each entry's final assistant turn.

    The dialogue's last turn is the reference response; its emotion label is
    the gold label for the weighted F1. Judge scoring runs only when a
    ``judge_client`` is supplied.
    """
    if not entries:
        raise MetricError("no entries to evaluate")
    missing = [e.id for e in entries if e.id not in predictions]
    if missing:
        raise MetricError(f"predictions missing for {len(missing)} entries: {missing[:5]}")
    embed_client = embed_client or HashTokenEmbedClient()

    references, candidates = [], []
    gold_emotions, predicted_emotions = [], []
    rows: list[DialogueScores] = []
    judge_total, judge_count = 0.0, 0
    for entry in entries:
        pred = predictions[entry.id]
        final_turn = entry.script.turns[-1]
        references.append(final_turn.content)
        candidates.append(pred.response)
        gold_emotions.append(final_turn.style.emotion)
        predicted_emotions.append(pred.emotion or "")
        judge: Optional[float] = None
        if judge_client is not None:
            judge = gpt_eval(
                _dialogue_context(entry),
                pred.response,
                judge_client,
                seed=derive_seed(judge_seed, entry.id),
            )
            judge_total += judge
            judge_count += 1
        rows.append(
            DialogueScores(
                entry_id=entry.id,
                rouge_l=rouge_l(pred.response, final_turn.content),
                meteor=meteor(pred.response, final_turn.content),
                embed_score=embed_score(pred.response, final_turn.content, embed_client),
                emotion_gold=final_turn.style.emotion,
                emotion_predicted=pred.emotion,
                gpt_eval=judge,
            )
        )

    report = MetricReport(
        bleu=bleu(candidates, references),
        rouge_l=sum(r.rouge_l for r in rows) / len(rows),
        meteor=sum(r.meteor for r in rows) / len(rows),
        embed_score=sum(r.embed_score for r in rows) / len(rows),
        f1_emotion=weighted_f1(predicted_emotions, gold_emotions),
        gpt_eval=judge_total / judge_count if judge_count else None,
    )
    return report, rows


def write_eval_report(
    report: MetricReport,
    rows: Sequence[DialogueScores],
    report_path: str | Path,
    figures: bool = True,
) -> list[Path]:
    """Write report.json (corpus + per-dialogue) and its figures."""
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "corpus": report.to_json_dict(),
        "dialogues": [r.to_json_dict() for r in rows],
    }
    report_path.write_text(
        json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    written = [report_path]
    if figures:
        written += save_eval_figures(report, rows, report_path.parent)
    return written


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def save_eval_figures(
    report: MetricReport, rows: Sequence[DialogueScores], out_dir: str | Path
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    with plt.rc_context(_FIG_STYLE):
        fig, ax = plt.subplots()
        names = ["BLEU", "ROUGE-L", "METEOR", "Embed"]
        values = [report.bleu, report.rouge_l, report.meteor, report.embed_score]
        names.append("F1 emotion")
        values.append(report.f1_emotion)
        ax.bar(names, values, color="#4878cf")
        ax.set_ylim(0, 1)
        ax.set_ylabel("score")
        ax.set_title("Corpus metric summary")
        for x, v in enumerate(values):
            ax.text(x, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
        path = out_dir / "metric_summary.png"
        fig.savefig(path, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

        labels = sorted({r.emotion_gold for r in rows} | {r.emotion_predicted or "" for r in rows} - {""})
        if labels:
            index = {label: i for i, label in enumerate(labels)}
            grid = [[0] * len(labels) for _ in labels]
            for r in rows:
                if r.emotion_predicted in index:
                    grid[index[r.emotion_gold]][index[r.emotion_predicted]] += 1
            fig, ax = plt.subplots()
            im = ax.imshow(grid, cmap="Blues")
            ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
            ax.set_yticks(range(len(labels)), labels)
            ax.set_xlabel("predicted emotion")
            ax.set_ylabel("gold emotion")
            ax.set_title("Emotion confusion")
            ax.grid(False)
            fig.colorbar(im, ax=ax, shrink=0.8)
            path = out_dir / "emotion_confusion.png"
            fig.savefig(path, bbox_inches="tight")
            plt.close(fig)
            written.append(path)
    return written


def write_stats_report(
    entries: Sequence[ManifestEntry],
    out_dir: str | Path,
    stats: Optional[CorpusStats] = None,
    figures: bool = True,
) -> list[Path]:
    """Write stats.json plus distribution figures for a corpus."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = stats or corpus_stats(entries)
    stats_path = out_dir / "stats.json"
    stats_path.write_text(
        json.dumps(stats.to_json_dict(), ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )
    written = [stats_path]
    if not figures:
        return written

    with plt.rc_context(_FIG_STYLE):
        if stats.emotion_counts:
            fig, ax = plt.subplots()
            items = sorted(stats.emotion_counts.items(), key=lambda kv: -kv[1])
            ax.bar([k for k, _ in items], [v for _, v in items], color="#d65f5f")
            ax.set_ylabel("turns")
            ax.set_title("Emotion distribution")
            plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
            path = out_dir / "emotion_distribution.png"
            fig.savefig(path, bbox_inches="tight")
            plt.close(fig)
            written.append(path)

        if entries:
            fig, ax = plt.subplots()
            turn_counts = [len(e.script.turns) for e in entries]
            lo, hi = min(turn_counts), max(turn_counts)
            ax.hist(turn_counts, bins=range(lo, hi + 2), align="left",
                    rwidth=0.8, color="#6acc65")
            ax.set_xlabel("turns per dialogue")
            ax.set_ylabel("dialogues")
            ax.set_title(f"Turn distribution (avg {stats.avg_turns:.2f})")
            path = out_dir / "turns_histogram.png"
            fig.savefig(path, bbox_inches="tight")
            plt.close(fig)
            written.append(path)
    return written
