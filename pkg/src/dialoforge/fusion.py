"""Windowed query-attention fusion of expert audio features, with the
multi-turn dialogue loss and hand-derived gradients.

The pipeline per expert feature sequence (N frames, width D):

  1. segment into ceil(N/L) windows of L frames (last window zero-padded
     and masked; floor mode drops the partial window instead),
  2. K trainable queries cross-attend over each window (single head):
     A = softmax((Q Wq)(F Wk)^T / sqrt(D) + mask), H = (A (F Wv)) Wo,
  3. a sigmoid gate scores each window-level feature row,
  4. gated rows from the three experts are concatenated along the feature
     axis and projected to the model width; output rows = ceil(N/L) * K.

The toy decoder conditions position (t, j) on fused features of turns 1..t
(turn-causal cross-attention) and on all previously emitted tokens (mean of
their embeddings), then scores the vocabulary; the dialogue loss is the
summed negative log-likelihood over every target position.

Everything runs in float64 with no stochastic layers, so all checks are
exactly reproducible. ``backward_and_gradcheck`` compares the analytic
gradients against central finite differences parameter by parameter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError
from .rng import derive_seed
from .schema import PIPELINE_SAMPLE_RATE, Waveform

EXPERTS = ("speech", "emotion", "beat")

FEATURE_HOP = 160  # samples per frame at 16 kHz -> 100 frames/s
FEATURE_FRAME_RATE = 100.0
_N_RAW_STATS = 12


# ---------------------------------------------------------------------------
# Feature extraction surrogates
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureSeq:
    """Frame-aligned features from one expert encoder surrogate."""

    expert: str
    frames: np.ndarray  # (N, D)
    frame_rate: float = FEATURE_FRAME_RATE

    def __post_init__(self):
        if self.expert not in EXPERTS:
            raise ContractError(f"unknown expert {self.expert!r}")
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 2:
            raise ContractError(f"frames must be (N, D), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("frames must be finite")
        object.__setattr__(self, "frames", arr)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _frame_stats(frames: np.ndarray) -> np.ndarray:
    """Deterministic per-frame statistics: energies, zero crossings, bands."""
    energy = np.mean(np.square(frames), axis=1)
    log_energy = np.log1p(energy)
    signs = np.sign(frames)
    zcr = np.mean(np.abs(np.diff(signs, axis=1)) > 0, axis=1)
    mean_abs = np.mean(np.abs(frames), axis=1)
    peak = np.max(np.abs(frames), axis=1)
    spectrum = np.square(np.abs(np.fft.rfft(frames, axis=1)))  # (N, 81)
    edges = np.linspace(0, spectrum.shape[1], 8, dtype=int)[:-1]
    bands = np.add.reduceat(spectrum, edges, axis=1) / frames.shape[1]
    return np.column_stack([energy, log_energy, zcr, mean_abs, peak, bands])


def _expert_projection(expert: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed("mock-features", expert, dim))
    return rng.standard_normal((_N_RAW_STATS, dim)) / math.sqrt(_N_RAW_STATS)


def extract_mock_features(
    w: Waveform, dims: tuple[int, int, int] = (8, 8, 8)
) -> tuple[FeatureSeq, FeatureSeq, FeatureSeq]:
    """Deterministic expert-feature surrogates at 100 frames/s.

    All three sequences share N = floor(len / 160) frames; the per-frame raw
    statistics are linearly projected (no bias) to each expert width, so an
    all-zero waveform yields all-zero features.
    """
    if w.sample_rate != PIPELINE_SAMPLE_RATE:
        raise ContractError(f"expected {PIPELINE_SAMPLE_RATE} Hz input, got {w.sample_rate}")
    n = len(w) // FEATURE_HOP
    if n < 1:
        raise ContractError(f"waveform shorter than one hop ({FEATURE_HOP} samples)")
    frames = w.samples[: n * FEATURE_HOP].reshape(n, FEATURE_HOP)
    stats = _frame_stats(frames)
    out = []
    for expert, dim in zip(EXPERTS, dims):
        out.append(FeatureSeq(expert=expert, frames=stats @ _expert_projection(expert, dim)))
    return tuple(out)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class QFormerParams:
    """One expert's trainable queries and attention projections."""

    queries: np.ndarray  # (K, D)
    w_q: np.ndarray  # (D, D)
    w_k: np.ndarray  # (D, D)
    w_v: np.ndarray  # (D, D)
    w_o: np.ndarray  # (D, D)


@dataclass
class GateParams:
    """Affine map to a scalar, squashed by a sigmoid."""

    weight: np.ndarray  # (D,)
    bias: np.ndarray  # ()


@dataclass
class ExpertParams:
    qformer: QFormerParams
    gate: GateParams


@dataclass
class ToyDecoderParams:
    """Smallest conditioner that uses fused features and token history."""

    embed: np.ndarray  # (V, D_tok)
    w_tq: np.ndarray  # (D_tok, D_att)
    w_zk: np.ndarray  # (D_model, D_att)
    w_zv: np.ndarray  # (D_model, D_att)
    w_out: np.ndarray  # (D_att + D_tok, V)
    b_out: np.ndarray  # (V,)

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]


@dataclass
class FusionParams:
    """Every trainable tensor of the fusion kernel plus the toy decoder."""

    experts: dict[str, ExpertParams]
    projection: np.ndarray  # (D_s + D_e + D_b, D_model)
    projection_bias: np.ndarray  # (D_model,)
    decoder: ToyDecoderParams


@dataclass(frozen=True)
class FusionConfig:
    """Structural settings: window length, queries per window, model width."""

    window_len: int = 17
    queries_per_window: int = 1
    model_dim: int = 16
    rounding: str = "ceil"  # "floor" drops the trailing partial window
    gate_mode: str = "per_window"  # "per_frame" gates on mean valid frames

    def __post_init__(self):
        if self.window_len < 1:
            raise ContractError("window_len must be >= 1")
        if self.queries_per_window < 1:
            raise ContractError("queries_per_window must be >= 1")
        if self.rounding not in ("ceil", "floor"):
            raise ContractError(f"unknown rounding {self.rounding!r}")
        if self.gate_mode not in ("per_window", "per_frame"):
            raise ContractError(f"unknown gate_mode {self.gate_mode!r}")


def init_params(
    seed: int,
    expert_dims: tuple[int, int, int],
    cfg: FusionConfig,
    vocab_size: int,
    token_dim: int = 8,
    attn_dim: int = 8,
) -> FusionParams:
    """Random double-precision parameters at gradient-friendly scales."""
    rng = np.random.default_rng(seed)
    experts = {}
    for name, dim in zip(EXPERTS, expert_dims):
        experts[name] = ExpertParams(
            qformer=QFormerParams(
                queries=0.5 * rng.standard_normal((cfg.queries_per_window, dim)),
                w_q=rng.standard_normal((dim, dim)) / math.sqrt(dim),
                w_k=rng.standard_normal((dim, dim)) / math.sqrt(dim),
                w_v=rng.standard_normal((dim, dim)) / math.sqrt(dim),
                w_o=rng.standard_normal((dim, dim)) / math.sqrt(dim),
            ),
            gate=GateParams(
                weight=0.5 * rng.standard_normal(dim) / math.sqrt(dim),
                bias=np.asarray(0.0),
            ),
        )
    d_cat = sum(expert_dims)
    decoder = ToyDecoderParams(
        embed=0.5 * rng.standard_normal((vocab_size, token_dim)),
        w_tq=rng.standard_normal((token_dim, attn_dim)) / math.sqrt(token_dim),
        w_zk=rng.standard_normal((cfg.model_dim, attn_dim)) / math.sqrt(cfg.model_dim),
        w_zv=rng.standard_normal((cfg.model_dim, attn_dim)) / math.sqrt(cfg.model_dim),
        w_out=rng.standard_normal((attn_dim + token_dim, vocab_size))
        / math.sqrt(attn_dim + token_dim),
        b_out=np.zeros(vocab_size),
    )
    return FusionParams(
        experts=experts,
        projection=rng.standard_normal((d_cat, cfg.model_dim)) / math.sqrt(d_cat),
        projection_bias=np.zeros(cfg.model_dim),
        decoder=decoder,
    )


# ---------------------------------------------------------------------------
# Parameter flattening and the tensor container
# ---------------------------------------------------------------------------


def named_tensors(params: FusionParams) -> list[tuple[str, np.ndarray]]:
    """Canonical (name, tensor) order used for flattening and serialization."""
    out: list[tuple[str, np.ndarray]] = []
    for name in EXPERTS:
        ep = params.experts[name]
        out += [
            (f"{name}.queries", ep.qformer.queries),
            (f"{name}.w_q", ep.qformer.w_q),
            (f"{name}.w_k", ep.qformer.w_k),
            (f"{name}.w_v", ep.qformer.w_v),
            (f"{name}.w_o", ep.qformer.w_o),
            (f"{name}.gate_weight", ep.gate.weight),
            (f"{name}.gate_bias", ep.gate.bias),
        ]
    out += [
        ("projection", params.projection),
        ("projection_bias", params.projection_bias),
        ("decoder.embed", params.decoder.embed),
        ("decoder.w_tq", params.decoder.w_tq),
        ("decoder.w_zk", params.decoder.w_zk),
        ("decoder.w_zv", params.decoder.w_zv),
        ("decoder.w_out", params.decoder.w_out),
        ("decoder.b_out", params.decoder.b_out),
    ]
    return out


def params_to_vector(params: FusionParams) -> np.ndarray:
    return np.concatenate([np.asarray(t, dtype=np.float64).ravel() for _, t in named_tensors(params)])


def params_from_vector(template: FusionParams, vector: np.ndarray) -> FusionParams:
    """Rebuild a parameter bundle with the template's shapes and new values."""
    tensors = named_tensors(template)
    total = sum(np.asarray(t).size for _, t in tensors)
    if vector.size != total:
        raise ContractError(f"vector length {vector.size} != parameter count {total}")
    values: dict[str, np.ndarray] = {}
    offset = 0
    for name, tensor in tensors:
        size = np.asarray(tensor).size
        values[name] = vector[offset : offset + size].reshape(np.asarray(tensor).shape).copy()
        offset += size
    experts = {
        name: ExpertParams(
            qformer=QFormerParams(
                queries=values[f"{name}.queries"],
                w_q=values[f"{name}.w_q"],
                w_k=values[f"{name}.w_k"],
                w_v=values[f"{name}.w_v"],
                w_o=values[f"{name}.w_o"],
            ),
            gate=GateParams(
                weight=values[f"{name}.gate_weight"],
                bias=values[f"{name}.gate_bias"].reshape(()),
            ),
        )
        for name in EXPERTS
    }
    decoder = ToyDecoderParams(
        embed=values["decoder.embed"],
        w_tq=values["decoder.w_tq"],
        w_zk=values["decoder.w_zk"],
        w_zv=values["decoder.w_zv"],
        w_out=values["decoder.w_out"],
        b_out=values["decoder.b_out"],
    )
    return FusionParams(
        experts=experts,
        projection=values["projection"],
        projection_bias=values["projection_bias"],
        decoder=decoder,
    )


_CONTAINER_FORMAT = "dialoforge-tensors-v1"


def save_params(path: str | Path, params: FusionParams) -> None:
    """Write the flat binary tensor container.

    Layout: one UTF-8 JSON header line naming the format, dtype, byte order,
    and each tensor's name/shape in order, followed by the raw little-endian
    float64 tensor data concatenated in that order (C layout).
    """
    tensors = named_tensors(params)
    header = {
        "format": _CONTAINER_FORMAT,
        "dtype": "float64",
        "byteorder": "little",
        "tensors": [{"name": n, "shape": list(np.asarray(t).shape)} for n, t in tensors],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        for _, tensor in tensors:
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_params(path: str | Path) -> FusionParams:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != _CONTAINER_FORMAT:
            raise ContractError(f"not a {_CONTAINER_FORMAT} container: {path}")
        values: dict[str, np.ndarray] = {}
        for meta in header["tensors"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ContractError(f"truncated tensor data for {meta['name']}")
            values[meta["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    experts = {
        name: ExpertParams(
            qformer=QFormerParams(
                queries=values[f"{name}.queries"],
                w_q=values[f"{name}.w_q"],
                w_k=values[f"{name}.w_k"],
                w_v=values[f"{name}.w_v"],
                w_o=values[f"{name}.w_o"],
            ),
            gate=GateParams(weight=values[f"{name}.gate_weight"],
                            bias=values[f"{name}.gate_bias"].reshape(())),
        )
        for name in EXPERTS
    }
    decoder = ToyDecoderParams(
        embed=values["decoder.embed"],
        w_tq=values["decoder.w_tq"],
        w_zk=values["decoder.w_zk"],
        w_zv=values["decoder.w_zv"],
        w_out=values["decoder.w_out"],
        b_out=values["decoder.b_out"],
    )
    return FusionParams(
        experts=experts,
        projection=values["projection"],
        projection_bias=values["projection_bias"],
        decoder=decoder,
    )


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------


def _softmax_last(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def segment_windows(frames: np.ndarray, window_len: int, rounding: str = "ceil"):
    """Slice (N, D) frames into (W, L, D) windows plus a (W, L) validity mask.

    Ceiling mode zero-pads the final partial window; floor mode drops it.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n, d = frames.shape
    if n < 1:
        raise ContractError("need at least one frame")
    if rounding == "floor":
        w = n // window_len
        if w < 1:
            raise ContractError(f"floor rounding drops all frames (N={n} < L={window_len})")
        windows = frames[: w * window_len].reshape(w, window_len, d)
        mask = np.ones((w, window_len), dtype=bool)
        return windows, mask
    w = math.ceil(n / window_len)
    padded = np.zeros((w * window_len, d))
    padded[:n] = frames
    mask = np.zeros(w * window_len, dtype=bool)
    mask[:n] = True
    return padded.reshape(w, window_len, d), mask.reshape(w, window_len)


@dataclass
class _QFormerCache:
    windows: np.ndarray
    mask: np.ndarray
    qp: np.ndarray
    kp: np.ndarray
    vp: np.ndarray
    attn: np.ndarray
    ctx: np.ndarray


def _qformer_batch(p: QFormerParams, windows: np.ndarray, mask: np.ndarray):
    """All windows at once: softmax((Q Wq)(F Wk)^T / sqrt(D)) (F Wv) Wo."""
    d = windows.shape[-1]
    if p.queries.shape[1] != d:
        raise ContractError(
            f"query width {p.queries.shape[1]} != feature width {d}"
        )
    if not mask.any(axis=1).all():
        raise ContractError("a window has no valid frames")
    qp = p.queries @ p.w_q  # (K, D)
    kp = windows @ p.w_k  # (W, L, D)
    vp = windows @ p.w_v  # (W, L, D)
    scores = np.einsum("kd,wld->wkl", qp, kp) / math.sqrt(d)
    scores = np.where(mask[:, None, :], scores, -np.inf)
    attn = _softmax_last(scores)  # (W, K, L)
    ctx = np.einsum("wkl,wld->wkd", attn, vp)
    hidden = ctx @ p.w_o  # (W, K, D)
    return hidden, _QFormerCache(windows, mask, qp, kp, vp, attn, ctx)


def qformer_window(p: QFormerParams, window: np.ndarray, valid_mask: np.ndarray) -> np.ndarray:
    """Encode one L-frame window into K hidden features (padded frames masked)."""
    window = np.asarray(window, dtype=np.float64)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if window.ndim != 2 or valid_mask.shape != (window.shape[0],):
        raise ContractError("window must be (L, D) with an (L,) mask")
    if not valid_mask.any():
        raise ContractError("all frames in the window are masked")
    hidden, _ = _qformer_batch(p, window[None], valid_mask[None])
    return hidden[0]


def gate_weights(hidden: np.ndarray, gate: GateParams) -> np.ndarray:
    """Sigmoid of an affine map, one scalar per window-level feature row."""
    hidden = np.asarray(hidden, dtype=np.float64)
    z = hidden @ gate.weight + float(gate.bias)
    return 1.0 / (1.0 + np.exp(-z))


def fuse_project(
    h_per_expert: Sequence[np.ndarray],
    w_per_expert: Sequence[np.ndarray],
    projection: np.ndarray,
    projection_bias: np.ndarray,
) -> np.ndarray:
    """Gate, concatenate along the feature axis, and project to model width."""
    rows = {h.shape[0] for h in h_per_expert}
    if len(rows) != 1:
        raise ContractError(f"window-frame counts differ across experts: {sorted(rows)}")
    gated = [w[:, None] * h for h, w in zip(h_per_expert, w_per_expert)]
    u = np.concatenate(gated, axis=1)
    if u.shape[1] != projection.shape[0]:
        raise ContractError(
            f"concat width {u.shape[1]} != projection input {projection.shape[0]}"
        )
    return u @ projection + projection_bias


@dataclass
class _TurnCache:
    qf: dict[str, _QFormerCache]
    hidden: dict[str, np.ndarray]  # (M, D_x) flattened window-level rows
    gates: dict[str, np.ndarray]  # (M,)
    u: np.ndarray  # (M, D_cat)


def mixformer_turn(features: dict[str, np.ndarray], params: FusionParams, cfg: FusionConfig):
    """Fuse one turn's three expert feature matrices into Z (M, D_model)."""
    lengths = {f.shape[0] for f in features.values()}
    if len(lengths) != 1:
        raise ContractError(f"experts disagree on frame count: {sorted(lengths)}")
    qf_caches: dict[str, _QFormerCache] = {}
    hidden: dict[str, np.ndarray] = {}
    gates: dict[str, np.ndarray] = {}
    for name in EXPERTS:
        ep = params.experts[name]
        windows, mask = segment_windows(features[name], cfg.window_len, cfg.rounding)
        h3, cache = _qformer_batch(ep.qformer, windows, mask)
        w_count, k, d = h3.shape
        h = h3.reshape(w_count * k, d)
        if cfg.gate_mode == "per_window":
            gates[name] = gate_weights(h, ep.gate)
        else:
            # per-frame flag: gate on each window's mean valid frame, repeated per query
            means = np.stack(
                [windows[i][mask[i]].mean(axis=0) for i in range(w_count)]
            )
            per_window = gate_weights(means, ep.gate)
            gates[name] = np.repeat(per_window, k)
        hidden[name] = h
        qf_caches[name] = cache
    gated = [gates[n][:, None] * hidden[n] for n in EXPERTS]
    u = np.concatenate(gated, axis=1)
    z = u @ params.projection + params.projection_bias
    return z, _TurnCache(qf=qf_caches, hidden=hidden, gates=gates, u=u)


# ---------------------------------------------------------------------------
# Toy decoder and the dialogue loss
# ---------------------------------------------------------------------------


@dataclass
class _DecoderCache:
    tokens: np.ndarray
    turn_of_pos: np.ndarray
    turn_of_frame: np.ndarray
    z_cat: np.ndarray
    prefix_mean: np.ndarray
    counts: np.ndarray
    q: np.ndarray
    kz: np.ndarray
    vz: np.ndarray
    attn: np.ndarray
    g: np.ndarray
    probs: np.ndarray
    nll: np.ndarray


def _check_targets(z_turns: Sequence[np.ndarray], targets: Sequence[Sequence[int]], vocab: int):
    if len(z_turns) < 1:
        raise ContractError("need at least one turn")
    if len(z_turns) != len(targets):
        raise ContractError("one target sequence required per turn")
    for t, tokens in enumerate(targets):
        if len(tokens) < 1:
            raise ContractError(f"turn {t}: empty target sequence")
        for tok in tokens:
            if not (0 <= tok < vocab):
                raise ContractError(f"turn {t}: token id {tok} outside vocabulary {vocab}")
        if z_turns[t].shape[0] < 1:
            raise ContractError(f"turn {t}: no fused frames")


def _decoder_forward(
    dec: ToyDecoderParams, z_turns: Sequence[np.ndarray], targets: Sequence[Sequence[int]]
) -> _DecoderCache:
    tokens = np.concatenate([np.asarray(t, dtype=np.int64) for t in targets])
    turn_of_pos = np.concatenate(
        [np.full(len(t), i, dtype=np.int64) for i, t in enumerate(targets)]
    )
    turn_of_frame = np.concatenate(
        [np.full(z.shape[0], i, dtype=np.int64) for i, z in enumerate(z_turns)]
    )
    z_cat = np.vstack(z_turns)
    p_total = tokens.size

    tok_emb = dec.embed[tokens]  # (P, D_tok)
    csum = np.cumsum(tok_emb, axis=0)
    prefix = np.vstack([np.zeros((1, tok_emb.shape[1])), csum[:-1]])
    counts = np.maximum(np.arange(p_total), 1).astype(np.float64)[:, None]
    prefix_mean = prefix / counts

    d_att = dec.w_tq.shape[1]
    q = prefix_mean @ dec.w_tq  # (P, D_att)
    kz = z_cat @ dec.w_zk  # (M, D_att)
    vz = z_cat @ dec.w_zv  # (M, D_att)
    scores = q @ kz.T / math.sqrt(d_att)  # (P, M)
    allowed = turn_of_frame[None, :] <= turn_of_pos[:, None]
    scores = np.where(allowed, scores, -np.inf)
    attn = _softmax_last(scores)
    ctx = attn @ vz  # (P, D_att)
    g = np.concatenate([ctx, prefix_mean], axis=1)
    logits = g @ dec.w_out + dec.b_out
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    log_probs = shifted - log_norm[:, None]
    nll = -log_probs[np.arange(p_total), tokens]
    probs = np.exp(log_probs)
    return _DecoderCache(
        tokens=tokens,
        turn_of_pos=turn_of_pos,
        turn_of_frame=turn_of_frame,
        z_cat=z_cat,
        prefix_mean=prefix_mean,
        counts=counts,
        q=q,
        kz=kz,
        vz=vz,
        attn=attn,
        g=g,
        probs=probs,
        nll=nll,
    )


def dialogue_nll(
    z_turns: Sequence[np.ndarray],
    targets: Sequence[Sequence[int]],
    dec: ToyDecoderParams,
    return_positions: bool = False,
):
    """Summed negative log-likelihood of every response token.

    Position (t, j) is conditioned on the fused features of turns 1..t and on
    all previously emitted tokens; the total decomposes additively over
    positions (``return_positions`` exposes the per-turn slices).
    """
    z_turns = [np.asarray(z, dtype=np.float64) for z in z_turns]
    _check_targets(z_turns, targets, dec.vocab_size)
    cache = _decoder_forward(dec, z_turns, targets)
    loss = float(cache.nll.sum())
    if not math.isfinite(loss):
        raise NumericError("dialogue loss is not finite")
    if not return_positions:
        return loss
    per_turn = []
    offset = 0
    for t in targets:
        per_turn.append(cache.nll[offset : offset + len(t)].copy())
        offset += len(t)
    return loss, per_turn


# ---------------------------------------------------------------------------
# Full forward/backward
# ---------------------------------------------------------------------------


@dataclass
class FusionInstance:
    """One dialogue-sized problem: per-turn expert features plus targets."""

    turn_features: list[dict[str, np.ndarray]]
    targets: list[list[int]]


@dataclass
class _ForwardCache:
    turns: list[_TurnCache]
    z_turns: list[np.ndarray]
    decoder: _DecoderCache
    params: FusionParams
    cfg: FusionConfig


def fusion_forward(
    instance: FusionInstance, params: FusionParams, cfg: FusionConfig
) -> tuple[float, _ForwardCache]:
    """End-to-end loss for one instance, caching every intermediate."""
    turn_caches = []
    z_turns = []
    for features in instance.turn_features:
        z, cache = mixformer_turn(features, params, cfg)
        turn_caches.append(cache)
        z_turns.append(z)
    _check_targets(z_turns, instance.targets, params.decoder.vocab_size)
    dec_cache = _decoder_forward(params.decoder, z_turns, instance.targets)
    loss = float(dec_cache.nll.sum())
    if not math.isfinite(loss):
        raise NumericError("dialogue loss is not finite")
    return loss, _ForwardCache(
        turns=turn_caches, z_turns=z_turns, decoder=dec_cache, params=params, cfg=cfg
    )


def _zeros_like_params(params: FusionParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(np.asarray(t, dtype=np.float64)) for name, t in named_tensors(params)}


def fusion_backward(cache: _ForwardCache) -> dict[str, np.ndarray]:
    """Analytic gradients of the summed loss for every parameter tensor."""
    params, cfg, dec = cache.params, cache.cfg, cache.params.decoder
    grads = _zeros_like_params(params)
    dc = cache.decoder
    p_total = dc.tokens.size
    d_att = dec.w_tq.shape[1]
    d_tok = dec.embed.shape[1]

    # --- softmax cross-entropy head
    dlogits = dc.probs.copy()
    dlogits[np.arange(p_total), dc.tokens] -= 1.0
    grads["decoder.w_out"] += dc.g.T @ dlogits
    grads["decoder.b_out"] += dlogits.sum(axis=0)
    dg = dlogits @ dec.w_out.T
    dctx = dg[:, :d_att]
    dmean = dg[:, d_att:].copy()

    # --- cross-attention over fused frames
    dattn = dctx @ dc.vz.T
    dvz = dc.attn.T @ dctx
    dscores = dc.attn * (dattn - np.sum(dattn * dc.attn, axis=1, keepdims=True))
    dq = dscores @ dc.kz / math.sqrt(d_att)
    dkz = dscores.T @ dc.q / math.sqrt(d_att)
    grads["decoder.w_zk"] += dc.z_cat.T @ dkz
    grads["decoder.w_zv"] += dc.z_cat.T @ dvz
    dz_cat = dkz @ dec.w_zk.T + dvz @ dec.w_zv.T

    # --- prefix-mean token conditioning
    dmean += dq @ dec.w_tq.T
    grads["decoder.w_tq"] += dc.prefix_mean.T @ dq
    dprefix = dmean / dc.counts
    tail = np.flip(np.cumsum(np.flip(dprefix, axis=0), axis=0), axis=0)
    dtok_emb = np.vstack([tail[1:], np.zeros((1, d_tok))])
    np.add.at(grads["decoder.embed"], dc.tokens, dtok_emb)

    # --- per-turn Mix-Former backward
    frame_offset = 0
    for turn_cache, z in zip(cache.turns, cache.z_turns):
        m_rows = z.shape[0]
        dz = dz_cat[frame_offset : frame_offset + m_rows]
        frame_offset += m_rows

        du = dz @ params.projection.T
        grads["projection"] += turn_cache.u.T @ dz
        grads["projection_bias"] += dz.sum(axis=0)

        col = 0
        for name in EXPERTS:
            h = turn_cache.hidden[name]
            w = turn_cache.gates[name]
            dim = h.shape[1]
            dux = du[:, col : col + dim]
            col += dim

            dgate = np.sum(dux * h, axis=1)
            dh = w[:, None] * dux
            if cfg.gate_mode != "per_window":
                raise ContractError("analytic backward supports gate_mode='per_window' only")
            dz_gate = dgate * w * (1.0 - w)
            grads[f"{name}.gate_weight"] += h.T @ dz_gate
            grads[f"{name}.gate_bias"] += dz_gate.sum()
            dh += np.outer(dz_gate, params.experts[name].gate.weight)

            qf = turn_cache.qf[name]
            ep = params.experts[name].qformer
            w_count, win_len, d = qf.windows.shape
            k = ep.queries.shape[0]
            dh3 = dh.reshape(w_count, k, d)
            dctx3 = dh3 @ ep.w_o.T
            grads[f"{name}.w_o"] += np.einsum("wkd,wke->de", qf.ctx, dh3)
            dattn3 = np.einsum("wkd,wld->wkl", dctx3, qf.vp)
            dvp = np.einsum("wkl,wkd->wld", qf.attn, dctx3)
            ds = qf.attn * (dattn3 - np.sum(dattn3 * qf.attn, axis=-1, keepdims=True))
            dqp = np.einsum("wkl,wld->kd", ds, qf.kp) / math.sqrt(d)
            dkp = np.einsum("wkl,kd->wld", ds, qf.qp) / math.sqrt(d)
            grads[f"{name}.w_q"] += ep.queries.T @ dqp
            grads[f"{name}.queries"] += dqp @ ep.w_q.T
            grads[f"{name}.w_k"] += np.einsum("wlc,wld->cd", qf.windows, dkp)
            grads[f"{name}.w_v"] += np.einsum("wlc,wld->cd", qf.windows, dvp)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return grads


def grads_to_vector(params: FusionParams, grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[name].ravel() for name, _ in named_tensors(params)])


def _vector_backed_params(template: FusionParams) -> tuple[np.ndarray, FusionParams]:
    """A copy of the parameters whose tensors are views into one flat vector,
    so the finite-difference loop can perturb single entries in place."""
    vector = params_to_vector(template)
    views: dict[str, np.ndarray] = {}
    offset = 0
    for name, tensor in named_tensors(template):
        shape = np.asarray(tensor).shape
        size = int(np.prod(shape)) if shape else 1
        views[name] = vector[offset : offset + size].reshape(shape)
        offset += size
    experts = {
        name: ExpertParams(
            qformer=QFormerParams(
                queries=views[f"{name}.queries"],
                w_q=views[f"{name}.w_q"],
                w_k=views[f"{name}.w_k"],
                w_v=views[f"{name}.w_v"],
                w_o=views[f"{name}.w_o"],
            ),
            gate=GateParams(weight=views[f"{name}.gate_weight"],
                            bias=views[f"{name}.gate_bias"]),
        )
        for name in EXPERTS
    }
    decoder = ToyDecoderParams(
        embed=views["decoder.embed"],
        w_tq=views["decoder.w_tq"],
        w_zk=views["decoder.w_zk"],
        w_zv=views["decoder.w_zv"],
        w_out=views["decoder.w_out"],
        b_out=views["decoder.b_out"],
    )
    return vector, FusionParams(
        experts=experts,
        projection=views["projection"],
        projection_bias=views["projection_bias"],
        decoder=decoder,
    )


def backward_and_gradcheck(
    params: FusionParams,
    instance: FusionInstance,
    cfg: FusionConfig,
    eps: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per parameter entry: |g_a - g_n| / max(|g_a|, |g_n|, 1e-8), maximized
    over every entry of every tensor. The default eps sits at the top of
    the allowed range because the loss is O(10): central-difference
    truncation stays ~1e-9 while subtractive cancellation shrinks with eps.
    """
    if not (1e-6 <= eps <= 1e-4):
        raise ContractError("eps must be in [1e-6, 1e-4]")
    _, cache = fusion_forward(instance, params, cfg)
    analytic = grads_to_vector(params, fusion_backward(cache))
    theta, working = _vector_backed_params(params)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        original = theta[i]
        theta[i] = original + eps
        hi, _ = fusion_forward(instance, working, cfg)
        theta[i] = original - eps
        lo, _ = fusion_forward(instance, working, cfg)
        theta[i] = original
        numeric[i] = (hi - lo) / (2.0 * eps)
    if not np.all(np.isfinite(numeric)):
        raise NumericError("non-finite numeric gradient")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------


def random_instance(
    seed: int,
    max_frames: int = 40,
    max_expert_dim: int = 8,
    max_vocab: int = 12,
    max_turns: int = 3,
    cfg: Optional[FusionConfig] = None,
) -> tuple[FusionInstance, FusionParams, FusionConfig]:
    """A seeded small problem for gradient and shape checks."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(rng.integers(3, max_expert_dim + 1)) for _ in EXPERTS)
    vocab = int(rng.integers(4, max_vocab + 1))
    if cfg is None:
        cfg = FusionConfig(
            window_len=17,
            queries_per_window=1,
            model_dim=int(rng.integers(4, 17)),
        )
    n_turns = int(rng.integers(1, max_turns + 1))
    turn_features = []
    targets = []
    for _ in range(n_turns):
        n = int(rng.integers(1, max_frames + 1))
        turn_features.append(
            {name: rng.standard_normal((n, d)) for name, d in zip(EXPERTS, dims)}
        )
        m = int(rng.integers(1, 6))
        targets.append([int(t) for t in rng.integers(0, vocab, size=m)])
    params = init_params(
        seed=seed ^ 0x5EED,
        expert_dims=dims,
        cfg=cfg,
        vocab_size=vocab,
        token_dim=int(rng.integers(4, 9)),
        attn_dim=int(rng.integers(4, 9)),
    )
    return FusionInstance(turn_features=turn_features, targets=targets), params, cfg
