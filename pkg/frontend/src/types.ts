/** Wire types mirroring the review service JSON payloads. */

export interface PendingSummary {
  entry_id: string;
  subset: string;
  turn_count: number;
  max_wer: number;
  min_cosine: number;
  attempts_used: number;
}

export interface TurnView {
  turn_index: number;
  role: string;
  transcript: string;
  style: {
    gender: string;
    pitch: string;
    speed: string;
    emotion: string;
  };
  duration_s: number;
  wer: number;
}

export interface GateView {
  per_utterance_wer: number[];
  speaker_min_cosine: number;
  attempts_used: number;
  machine_verdict: string;
  machine_reason: string | null;
  human_verdict: string;
  human_reason: string | null;
  reviewer: string | null;
}

export interface DialogueDetail {
  id: string;
  subset: string;
  stage: string;
  turns: TurnView[];
  gate: GateView;
  mix_plan: { method: string; target_snr_db: number; crossfade_ms: number } | null;
  track_duration_s: number;
  audio_url: string;
}

export type Verdict = "approved" | "rejected";

export interface VerdictResponse {
  id: string;
  verification: GateView;
}
