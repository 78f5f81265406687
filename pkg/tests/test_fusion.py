from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialoforge.errors import ContractError
from dialoforge.fusion import (
    EXPERTS,
    FusionConfig,
    GateParams,
    QFormerParams,
    ToyDecoderParams,
    backward_and_gradcheck,
    dialogue_nll,
    extract_mock_features,
    fuse_project,
    fusion_backward,
    fusion_forward,
    gate_weights,
    grads_to_vector,
    init_params,
    load_params,
    mixformer_turn,
    named_tensors,
    params_from_vector,
    params_to_vector,
    qformer_window,
    random_instance,
    save_params,
    segment_windows,
    _vector_backed_params,
)
from dialoforge.schema import Waveform

# ---------------------------------------------------------------------------
# Mock feature extraction
# ---------------------------------------------------------------------------


def test_one_second_waveform_gives_100_frames():
    rng = np.random.default_rng(0)
    w = Waveform(samples=0.3 * rng.standard_normal(16000), sample_rate=16000)
    for seq in extract_mock_features(w):
        assert seq.n_frames == 100
        assert seq.frame_rate == 100.0


def test_zero_waveform_gives_zero_features():
    w = Waveform(samples=np.zeros(1600), sample_rate=16000)
    for seq in extract_mock_features(w):
        assert np.all(seq.frames == 0.0)


def test_features_deterministic():
    rng = np.random.default_rng(1)
    samples = 0.3 * rng.standard_normal(3200)
    a = extract_mock_features(Waveform(samples=samples, sample_rate=16000))
    b = extract_mock_features(Waveform(samples=samples.copy(), sample_rate=16000))
    for x, y in zip(a, b):
        assert np.array_equal(x.frames, y.frames)


def test_waveform_shorter_than_hop_rejected():
    with pytest.raises(ContractError):
        extract_mock_features(Waveform(samples=np.zeros(100), sample_rate=16000))


def test_expert_dims_respected():
    w = Waveform(samples=np.ones(1600) * 0.1, sample_rate=16000)
    speech, emotion, beat = extract_mock_features(w, dims=(4, 6, 8))
    assert speech.frames.shape == (10, 4)
    assert emotion.frames.shape == (10, 6)
    assert beat.frames.shape == (10, 8)


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


def test_windows_34_17_no_padding():
    windows, mask = segment_windows(np.ones((34, 3)), 17)
    assert windows.shape == (2, 17, 3)
    assert mask.all()


def test_windows_35_17_last_one_valid():
    windows, mask = segment_windows(np.ones((35, 3)), 17)
    assert windows.shape == (3, 17, 3)
    assert mask[:2].all()
    assert mask[2].sum() == 1
    assert np.all(windows[2, 1:] == 0.0)


def test_windows_10_17_padded():
    windows, mask = segment_windows(np.ones((10, 3)), 17)
    assert windows.shape == (1, 17, 3)
    assert mask[0].sum() == 10


def test_floor_mode_drops_partial():
    windows, mask = segment_windows(np.ones((35, 3)), 17, rounding="floor")
    assert windows.shape == (2, 17, 3)
    assert mask.all()
    with pytest.raises(ContractError):
        segment_windows(np.ones((10, 3)), 17, rounding="floor")


# ---------------------------------------------------------------------------
# Q-Former window attention
# ---------------------------------------------------------------------------


def _qf_params(seed: int, k: int, d: int) -> QFormerParams:
    rng = np.random.default_rng(seed)
    return QFormerParams(
        queries=rng.standard_normal((k, d)),
        w_q=rng.standard_normal((d, d)) / math.sqrt(d),
        w_k=rng.standard_normal((d, d)) / math.sqrt(d),
        w_v=rng.standard_normal((d, d)) / math.sqrt(d),
        w_o=rng.standard_normal((d, d)) / math.sqrt(d),
    )


def test_single_query_gives_one_hidden_vector():
    p = _qf_params(0, k=1, d=5)
    window = np.random.default_rng(1).standard_normal((17, 5))
    hidden = qformer_window(p, window, np.ones(17, dtype=bool))
    assert hidden.shape == (1, 5)


def test_zero_wq_gives_uniform_attention_closed_form():
    # W_q = 0 -> scores all equal -> uniform attention over valid frames,
    # so H = mean(valid F W_v) W_o exactly.
    d = 4
    p = _qf_params(2, k=2, d=d)
    p.w_q[:] = 0.0
    rng = np.random.default_rng(3)
    window = rng.standard_normal((10, d))
    mask = np.zeros(10, dtype=bool)
    mask[:7] = True
    window[~mask] = 0.0
    hidden = qformer_window(p, window, mask)
    expected = np.tile((window[mask] @ p.w_v).mean(axis=0) @ p.w_o, (2, 1))
    assert np.allclose(hidden, expected, atol=1e-12)


def test_attention_rows_sum_to_one_and_masked_get_zero():
    from dialoforge.fusion import _qformer_batch

    p = _qf_params(4, k=3, d=6)
    windows, mask = segment_windows(np.random.default_rng(5).standard_normal((40, 6)), 17)
    _, cache = _qformer_batch(p, windows, mask)
    sums = cache.attn.sum(axis=-1)
    assert np.allclose(sums, 1.0, atol=1e-6)
    assert np.all(cache.attn[~np.broadcast_to(mask[:, None, :], cache.attn.shape)] == 0.0)


def test_all_masked_window_rejected():
    p = _qf_params(6, k=1, d=3)
    with pytest.raises(ContractError):
        qformer_window(p, np.zeros((5, 3)), np.zeros(5, dtype=bool))


# ---------------------------------------------------------------------------
# Gates
# ---------------------------------------------------------------------------


def test_gate_zero_inputs_give_half():
    gate = GateParams(weight=np.zeros(4), bias=np.asarray(0.0))
    assert gate_weights(np.zeros((3, 4)), gate) == pytest.approx([0.5, 0.5, 0.5])


def test_gate_saturates_with_large_bias():
    gate = GateParams(weight=np.zeros(4), bias=np.asarray(20.0))
    assert np.all(gate_weights(np.zeros((2, 4)), gate) > 0.9999)


def test_gate_monotone_in_preactivation():
    gate = GateParams(weight=np.array([1.0, 0.0]), bias=np.asarray(0.0))
    hidden = np.array([[-2.0, 0.0], [-1.0, 0.0], [0.5, 0.0], [3.0, 0.0]])
    w = gate_weights(hidden, gate)
    assert np.all(np.diff(w) > 0)


def test_gates_strictly_inside_unit_interval():
    rng = np.random.default_rng(7)
    gate = GateParams(weight=rng.standard_normal(8), bias=np.asarray(0.3))
    w = gate_weights(rng.standard_normal((200, 8)) * 5, gate)
    assert np.all(w > 0.0) and np.all(w < 1.0)


# ---------------------------------------------------------------------------
# fuse_project
# ---------------------------------------------------------------------------


def test_fuse_output_shape_34_frames():
    rng = np.random.default_rng(8)
    h = [rng.standard_normal((2, 4)) for _ in range(3)]
    w = [rng.random(2) for _ in range(3)]
    projection = rng.standard_normal((12, 16))
    z = fuse_project(h, w, projection, np.zeros(16))
    assert z.shape == (2, 16)


def test_fuse_zero_gates_give_bias_rows():
    rng = np.random.default_rng(9)
    h = [rng.standard_normal((3, 4)) for _ in range(3)]
    zeros = [np.zeros(3) for _ in range(3)]
    bias = rng.standard_normal(5)
    z = fuse_project(h, zeros, rng.standard_normal((12, 5)), bias)
    assert np.allclose(z, np.tile(bias, (3, 1)))


def test_fuse_frame_count_mismatch_rejected():
    rng = np.random.default_rng(10)
    h = [rng.standard_normal((2, 4)), rng.standard_normal((3, 4)), rng.standard_normal((2, 4))]
    w = [np.ones(2), np.ones(3), np.ones(2)]
    with pytest.raises(ContractError):
        fuse_project(h, w, rng.standard_normal((12, 5)), np.zeros(5))


def test_fuse_expert_permutation_consistency():
    rng = np.random.default_rng(11)
    dims = (3, 4, 5)
    h = [rng.standard_normal((6, d)) for d in dims]
    w = [rng.random(6) for _ in dims]
    projection = rng.standard_normal((sum(dims), 7))
    bias = rng.standard_normal(7)
    z = fuse_project(h, w, projection, bias)

    order = [2, 0, 1]
    blocks = np.split(projection, np.cumsum(dims)[:-1], axis=0)
    permuted_projection = np.vstack([blocks[i] for i in order])
    z_permuted = fuse_project(
        [h[i] for i in order], [w[i] for i in order], permuted_projection, bias
    )
    assert np.allclose(z, z_permuted, atol=1e-12)


def test_mixformer_turn_shape_law_instance():
    # N=34, L=17, K=1 -> 2 fused frames of model width
    cfg = FusionConfig(window_len=17, queries_per_window=1, model_dim=16)
    params = init_params(0, (8, 8, 8), cfg, vocab_size=10)
    rng = np.random.default_rng(12)
    features = {name: rng.standard_normal((34, 8)) for name in EXPERTS}
    z, _ = mixformer_turn(features, params, cfg)
    assert z.shape == (2, 16)


@settings(max_examples=200, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=60),
    window_len=st.integers(min_value=1, max_value=25),
    k=st.integers(min_value=1, max_value=4),
)
def test_shape_law_property(n, window_len, k):
    cfg = FusionConfig(window_len=window_len, queries_per_window=k, model_dim=6)
    params = init_params(99, (3, 3, 3), cfg, vocab_size=5)
    rng = np.random.default_rng(n * 1000 + window_len * 10 + k)
    features = {name: rng.standard_normal((n, 3)) for name in EXPERTS}
    z, cache = mixformer_turn(features, params, cfg)
    assert z.shape == (math.ceil(n / window_len) * k, 6)
    for name in EXPERTS:
        gates = cache.gates[name]
        assert np.all((gates > 0.0) & (gates < 1.0))
        sums = cache.qf[name].attn.sum(axis=-1)
        assert np.allclose(sums, 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# dialogue_nll
# ---------------------------------------------------------------------------


def _uniform_decoder(vocab: int, d_model: int, d_tok: int = 4, d_att: int = 4) -> ToyDecoderParams:
    return ToyDecoderParams(
        embed=np.zeros((vocab, d_tok)),
        w_tq=np.zeros((d_tok, d_att)),
        w_zk=np.zeros((d_model, d_att)),
        w_zv=np.zeros((d_model, d_att)),
        w_out=np.zeros((d_att + d_tok, vocab)),
        b_out=np.zeros(vocab),
    )


def test_uniform_logits_single_token_is_log_vocab():
    dec = _uniform_decoder(vocab=10, d_model=3)
    z = [np.random.default_rng(0).standard_normal((2, 3))]
    assert dialogue_nll(z, [[4]], dec) == pytest.approx(math.log(10), abs=1e-12)


def test_saturated_correct_logits_near_zero_loss():
    dec = _uniform_decoder(vocab=8, d_model=3)
    dec.b_out[2] = 30.0
    z = [np.random.default_rng(1).standard_normal((2, 3))]
    assert dialogue_nll(z, [[2, 2, 2]], dec) < 1e-9


def test_loss_nonnegative_and_additive_over_positions():
    inst, params, cfg = random_instance(21)
    _, cache = fusion_forward(inst, params, cfg)
    z_turns = cache.z_turns
    total, per_turn = dialogue_nll(z_turns, inst.targets, params.decoder, return_positions=True)
    assert total >= 0.0
    assert total == pytest.approx(sum(float(p.sum()) for p in per_turn), abs=1e-12)
    assert all(np.all(p >= 0.0) for p in per_turn)


def test_two_turn_loss_matches_manual_summation_oracle():
    # tiny fixed instance, recomputed position by position with plain loops
    rng = np.random.default_rng(33)
    d_model, d_tok, d_att, vocab = 3, 2, 2, 4
    dec = ToyDecoderParams(
        embed=rng.standard_normal((vocab, d_tok)),
        w_tq=rng.standard_normal((d_tok, d_att)),
        w_zk=rng.standard_normal((d_model, d_att)),
        w_zv=rng.standard_normal((d_model, d_att)),
        w_out=rng.standard_normal((d_att + d_tok, vocab)),
        b_out=rng.standard_normal(vocab),
    )
    z_turns = [rng.standard_normal((2, d_model)), rng.standard_normal((1, d_model))]
    targets = [[1, 3], [0]]

    tokens = [t for turn in targets for t in turn]
    turn_of_pos = [i for i, turn in enumerate(targets) for _ in turn]
    expected = 0.0
    for pos, (token, turn_idx) in enumerate(zip(tokens, turn_of_pos)):
        prev = tokens[:pos]
        mean = (
            sum(dec.embed[t] for t in prev) / len(prev)
            if prev
            else np.zeros(d_tok)
        )
        query = mean @ dec.w_tq
        frames = np.vstack(z_turns[: turn_idx + 1])
        scores = np.array(
            [query @ (frame @ dec.w_zk) / math.sqrt(d_att) for frame in frames]
        )
        attn = np.exp(scores - scores.max())
        attn = attn / attn.sum()
        ctx = sum(a * (frame @ dec.w_zv) for a, frame in zip(attn, frames))
        logits = np.concatenate([ctx, mean]) @ dec.w_out + dec.b_out
        expected += math.log(np.exp(logits - logits.max()).sum()) + logits.max() - logits[token]

    assert dialogue_nll(z_turns, targets, dec) == pytest.approx(expected, abs=1e-9)


def test_empty_targets_rejected():
    dec = _uniform_decoder(vocab=4, d_model=3)
    with pytest.raises(ContractError):
        dialogue_nll([np.zeros((1, 3))], [[]], dec)
    with pytest.raises(ContractError):
        dialogue_nll([], [], dec)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def test_gradcheck_random_instance_passes():
    inst, params, cfg = random_instance(5)
    assert backward_and_gradcheck(params, inst, cfg) < 1e-4


def test_unused_expert_gate_has_zero_gradient():
    inst, params, cfg = random_instance(6)
    # zero the projection rows of the beat expert: its whole path is dead
    d_s = params.experts["speech"].qformer.w_q.shape[0]
    d_e = params.experts["emotion"].qformer.w_q.shape[0]
    d_b = params.experts["beat"].qformer.w_q.shape[0]
    params.projection[d_s + d_e : d_s + d_e + d_b, :] = 0.0
    _, cache = fusion_forward(inst, params, cfg)
    grads = fusion_backward(cache)
    assert np.all(grads["beat.gate_weight"] == 0.0)
    assert np.all(grads["beat.gate_bias"] == 0.0)
    assert np.all(grads["beat.queries"] == 0.0)
    # and the gradcheck still passes with the dead path in place
    assert backward_and_gradcheck(params, inst, cfg) < 1e-4


def test_perturbed_analytic_gradient_detected():
    # detector sensitivity: a 1e-2 error on one entry must surface as > 1e-3
    inst, params, cfg = random_instance(7, max_frames=8, max_turns=1)
    _, cache = fusion_forward(inst, params, cfg)
    analytic = grads_to_vector(params, fusion_backward(cache))
    theta, working = _vector_backed_params(params)
    eps = 1e-4
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        original = theta[i]
        theta[i] = original + eps
        hi, _ = fusion_forward(inst, working, cfg)
        theta[i] = original - eps
        lo, _ = fusion_forward(inst, working, cfg)
        theta[i] = original
        numeric[i] = (hi - lo) / (2 * eps)
    corrupted = analytic.copy()
    corrupted[3] += 1e-2
    denom = np.maximum(np.maximum(np.abs(corrupted), np.abs(numeric)), 1e-8)
    assert np.max(np.abs(corrupted - numeric) / denom) > 1e-3


def test_gradcheck_rejects_out_of_range_eps():
    inst, params, cfg = random_instance(8)
    with pytest.raises(ContractError):
        backward_and_gradcheck(params, inst, cfg, eps=1e-7)


# ---------------------------------------------------------------------------
# Parameter container
# ---------------------------------------------------------------------------


def test_params_vector_roundtrip():
    _, params, _ = random_instance(9)
    vector = params_to_vector(params)
    rebuilt = params_from_vector(params, vector)
    assert np.array_equal(params_to_vector(rebuilt), vector)


def test_container_roundtrip(tmp_path):
    _, params, _ = random_instance(10)
    path = tmp_path / "bundle.tensors"
    save_params(path, params)
    loaded = load_params(path)
    for (name_a, tensor_a), (name_b, tensor_b) in zip(
        named_tensors(params), named_tensors(loaded)
    ):
        assert name_a == name_b
        assert np.array_equal(np.asarray(tensor_a), np.asarray(tensor_b))


def test_container_rejects_foreign_file(tmp_path):
    path = tmp_path / "bundle.tensors"
    path.write_bytes(b'{"format":"something-else"}\n')
    with pytest.raises(ContractError):
        load_params(path)
