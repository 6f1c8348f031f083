import numpy as np
import pytest

from blockskip.diffusion import make_schedule, predict_initial, reverse_step, sample_chain
from blockskip.executor import (CacheError, FeatureCache, MaskError, MaskMatrix,
                                all_ones_mask, run_masked_chain, run_masked_step_binary,
                                run_masked_step_continuous)
from blockskip.metrics import block_macs
from blockskip.model import model_forward
from blockskip.seeds import stream
from blockskip.tensor import Tensor
from conftest import make_toy_model

LN_EPS = 1e-5


# -- reference interpreter: materializes every feature and applies the
# -- compute-or-reuse rule symbolically, written independently of the executor.

def _f32_ln(x):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    return ((x64 - mu) / np.sqrt(var + LN_EPS)).astype(np.float32)


def _f32_block(model, b, h, emb_row):
    kind = model.spec.block_kinds[b]
    p = lambda name: model.param(name).data
    u = _f32_ln(h + emb_row)
    prefix = f"block{b:02d}"
    if kind == "mlp":
        z = np.maximum(u @ p(f"{prefix}.w1") + p(f"{prefix}.b1"), np.float32(0.0))
        z = z @ p(f"{prefix}.w2") + p(f"{prefix}.b2")
    else:
        q, k, v = (u @ p(f"{prefix}.{n}") for n in ("wq", "wk", "wv"))
        scores = (q @ np.swapaxes(k, -1, -2)) * np.float32(1.0 / np.sqrt(model.spec.width))
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        z = ((e / e.sum(axis=-1, keepdims=True)) @ v) @ p(f"{prefix}.wo")
    return h + z


def _f32_embed(model, x):
    if model.spec.mode == "image8":
        x = x.reshape(x.shape[0], 16, 4)
    return x @ model.param("in_w").data + model.param("in_b").data


def _f32_project(model, h):
    out = h @ model.param("out_w").data + model.param("out_b").data
    if model.spec.mode == "image8":
        out = out.reshape(out.shape[0], 64)
    return out


def interpreter_step(model, x, t, row, cache_entries):
    """One step of the compute-or-reuse rule with explicit cache updates."""
    h = _f32_embed(model, x)
    emb_row = model.param("emb").data[t]
    entries = list(cache_entries)
    for b in range(model.num_blocks):
        if row[b]:
            h = _f32_block(model, b, h, emb_row)
            entries[b] = h
        else:
            assert entries[b] is not None
            h = entries[b]
    return _f32_project(model, h), h, entries


def interpreter_chain(model, x_start, mask, schedule):
    entries = [None] * model.num_blocks
    x = x_start.astype(np.float32)
    ends = []
    for t in range(schedule.timesteps - 1, -1, -1):
        eps, end, entries = interpreter_step(model, x, t, mask.binary[t], entries)
        ends.append(end)
        if t == 0:
            x = predict_initial(x, eps, t, schedule)
        else:
            x = reverse_step(x, eps, t, schedule, mode="ddim")
    return x, ends


# -- binary step ---------------------------------------------------------------


def _fresh_cache(model, x, t):
    """Cache populated by an all-compute step at the given timestep."""
    cache = FeatureCache(model.num_blocks)
    ones = np.ones(model.num_blocks, dtype=np.uint8)
    _, _, cache = run_masked_step_binary(model, x, t, ones, cache, last_step=True)
    return cache


def test_all_ones_row_matches_unmasked_forward_exactly():
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=10)
    x = stream(0, "x").standard_normal((3, 2)).astype(np.float32)
    eps_ref, feats_ref = model_forward(model, x, 9)
    cache = FeatureCache(4)
    eps, end, cache = run_masked_step_binary(model, x, 9,
                                             np.ones(4, dtype=np.uint8), cache,
                                             last_step=True)
    assert eps.data.tobytes() == eps_ref.data.tobytes()
    assert end.data.tobytes() == feats_ref[-1].data.tobytes()
    for b in range(4):
        assert cache.entries[b].tobytes() == feats_ref[b].data.tobytes()


def test_all_zeros_row_passes_previous_end_feature_through():
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=10)
    x9 = stream(1, "x").standard_normal((2, 2)).astype(np.float32)
    cache = _fresh_cache(model, x9, 9)
    prev_end = cache.entries[3].copy()
    x8 = stream(1, "y").standard_normal((2, 2)).astype(np.float32)
    _, end, cache2 = run_masked_step_binary(model, x8, 8,
                                            np.zeros(4, dtype=np.uint8), cache)
    assert end.data.tobytes() == prev_end.tobytes()
    assert cache2.writes == cache.writes  # no new writes


def test_mixed_row_matches_reference_interpreter():
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=10)
    x9 = stream(2, "x").standard_normal((2, 2)).astype(np.float32)
    cache = _fresh_cache(model, x9, 9)
    entries = [e.copy() for e in cache.entries]
    x8 = stream(2, "y").standard_normal((2, 2)).astype(np.float32)
    row = np.array([1, 0, 1, 0], dtype=np.uint8)
    eps, end, _ = run_masked_step_binary(model, x8, 8, row, cache)
    eps_ref, end_ref, _ = interpreter_step(model, x8, 8, row, entries)
    np.testing.assert_allclose(eps.data, eps_ref, atol=1e-5)
    np.testing.assert_allclose(end.data, end_ref, atol=1e-5)


def test_uninitialized_cache_read_names_the_cell():
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=10)
    x = np.zeros((1, 2), dtype=np.float32)
    row = np.array([1, 0, 1, 1], dtype=np.uint8)
    with pytest.raises(CacheError, match=r"block 1.*timestep 8"):
        run_masked_step_binary(model, x, 8, row, FeatureCache(4))


# -- continuous step -------------------------------------------------------------


def test_continuous_all_ones_equals_binary():
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=10)
    x = stream(3, "x").standard_normal((2, 2)).astype(np.float32)
    cache = _fresh_cache(model, x, 9)
    x8 = stream(3, "y").standard_normal((2, 2)).astype(np.float32)
    eps_b, end_b, _ = run_masked_step_binary(model, x8, 8, np.ones(4, np.uint8), cache)
    eps_c, end_c, _ = run_masked_step_continuous(model, x8, 8,
                                                 np.ones(4, np.float32), cache)
    assert eps_b.data.tobytes() == eps_c.data.tobytes()
    assert end_b.data.tobytes() == end_c.data.tobytes()


def test_continuous_all_zeros_serves_cache_without_updates():
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=10)
    x = stream(4, "x").standard_normal((2, 2)).astype(np.float32)
    cache = _fresh_cache(model, x, 9)
    x8 = stream(4, "y").standard_normal((2, 2)).astype(np.float32)
    eps, end, cache2 = run_masked_step_continuous(model, x8, 8,
                                                  np.zeros(4, np.float32), cache)
    assert end.data.tobytes() == cache.entries[3].tobytes()
    assert len(cache2.writes) == len(cache.writes)
    for b in range(4):
        assert cache2.entries[b] is cache.entries[b]


def test_continuous_half_is_exact_midpoint():
    model = make_toy_model(blocks=1, width=16, hidden=32, timesteps=10)
    x = stream(5, "x").standard_normal((2, 2)).astype(np.float32)
    cache = _fresh_cache(model, x, 9)
    x8 = stream(5, "y").standard_normal((2, 2)).astype(np.float32)
    _, computed, _ = run_masked_step_binary(model, x8, 8, np.ones(1, np.uint8),
                                            cache.clone())
    _, end, _ = run_masked_step_continuous(model, x8, 8,
                                           np.array([0.5], np.float32), cache)
    midpoint = np.float32(0.5) * computed.data + np.float32(0.5) * cache.entries[0]
    np.testing.assert_allclose(end.data, midpoint, atol=1e-7)


def test_continuous_binary_agree_on_binary_scores():
    model = make_toy_model(blocks=5, width=16, hidden=32, timesteps=10)
    rng = stream(6, "rows")
    x = rng.standard_normal((2, 2)).astype(np.float32)
    cache = _fresh_cache(model, x, 9)
    for _ in range(10):
        row = (rng.random(5) < 0.5).astype(np.float32)
        xk = rng.standard_normal((2, 2)).astype(np.float32)
        eps_b, end_b, cb = run_masked_step_binary(model, xk, 8,
                                                  row.astype(np.uint8), cache)
        eps_c, end_c, cc = run_masked_step_continuous(model, xk, 8, row, cache)
        assert eps_b.data.tobytes() == eps_c.data.tobytes()
        assert end_b.data.tobytes() == end_c.data.tobytes()
        for b in range(5):
            same = cb.entries[b].tobytes() == cc.entries[b].tobytes()
            assert same


def test_continuous_uninitialized_entry_with_partial_coefficient_raises():
    model = make_toy_model(blocks=2, width=16, hidden=32, timesteps=10)
    x = np.zeros((1, 2), dtype=np.float32)
    with pytest.raises(CacheError):
        run_masked_step_continuous(model, x, 9, np.array([1.0, 0.5], np.float32),
                                   FeatureCache(2), last_step=True)


def test_cache_write_discipline():
    # The cache entry changes at (t, b) exactly when the update condition
    # fired there: m=1 in binary mode, c > 0.5 or first step in continuous.
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=6)
    rng = stream(7, "mask")
    schedule = make_schedule(6, 0.01, 0.3)
    x = rng.standard_normal((2, 2)).astype(np.float32)
    cache = FeatureCache(4)
    for t in range(5, -1, -1):
        row = np.ones(4, np.uint8) if t == 5 else (rng.random(4) < 0.5).astype(np.uint8)
        before = list(cache.entries)
        eps, _, cache = run_masked_step_binary(model, x, t, row, cache,
                                               last_step=(t == 5))
        for b in range(4):
            if row[b]:
                assert (t, b) in cache.writes
            else:
                assert cache.entries[b] is before[b]
        x = reverse_step(x, eps.data, t, schedule) if t else predict_initial(
            x, eps.data, t, schedule)

    coeffs = np.array([0.9, 0.4, 0.51, 0.0], np.float32)
    before = list(cache.entries)
    _, _, after = run_masked_step_continuous(model, x, 3, coeffs, cache)
    new_writes = after.writes[len(cache.writes):]
    assert sorted(b for _, b in new_writes) == [0, 2]
    assert after.entries[1] is before[1] and after.entries[3] is before[3]


# -- full chains -----------------------------------------------------------------


def test_all_ones_chain_identical_to_unmasked():
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=12)
    schedule = make_schedule(12, 0.004, 0.25)
    noise = stream(8, "noise").standard_normal((4, 2)).astype(np.float32)
    mask = all_ones_mask(12, model.block_ids)
    ref, ref_rec = sample_chain(model, noise, schedule)
    got, rec, stats = run_masked_chain(model, noise, mask, schedule)
    assert got.tobytes() == ref.tobytes()
    for a, b in zip(rec.end_features, ref_rec.end_features):
        assert a.tobytes() == b.tobytes()
    assert stats.skipped == 0


def test_compute_counts_are_column_sums():
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=10)
    schedule = make_schedule(10, 0.004, 0.25)
    rng = stream(9, "mask")
    binary = (rng.random((10, 4)) < 0.6).astype(np.uint8)
    binary[-1] = 1
    mask = MaskMatrix(scores=binary.astype(np.float32), binary=binary,
                      block_ids=model.block_ids)
    noise = rng.standard_normal((2, 2)).astype(np.float32)
    _, _, stats = run_masked_chain(model, noise, mask, schedule)
    np.testing.assert_array_equal(stats.compute_counts, binary.sum(axis=0))
    assert stats.skipped == int((binary == 0).sum())


def test_handcrafted_mask_matches_interpreter():
    # skip block 2 at every other step
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=10)
    schedule = make_schedule(10, 0.004, 0.25)
    binary = np.ones((10, 4), dtype=np.uint8)
    binary[::2, 2] = 0
    binary[-1] = 1
    mask = MaskMatrix(scores=binary.astype(np.float32), binary=binary,
                      block_ids=model.block_ids)
    noise = stream(10, "noise").standard_normal((3, 2)).astype(np.float32)
    got, rec, _ = run_masked_chain(model, noise, mask, schedule)
    want, ends = interpreter_chain(model, noise, mask, schedule)
    np.testing.assert_allclose(got, want, atol=1e-5)
    for a, b in zip(rec.end_features, ends):
        np.testing.assert_allclose(a, b, atol=1e-5)


def test_random_masks_match_interpreter():
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=8)
    schedule = make_schedule(8, 0.004, 0.25)
    rng = stream(11, "mask")
    for _ in range(5):
        binary = (rng.random((8, 4)) < 0.6).astype(np.uint8)
        binary[-1] = 1
        mask = MaskMatrix(scores=binary.astype(np.float32), binary=binary,
                          block_ids=model.block_ids)
        noise = rng.standard_normal((2, 2)).astype(np.float32)
        got, _, _ = run_masked_chain(model, noise, mask, schedule)
        want, _ = interpreter_chain(model, noise, mask, schedule)
        np.testing.assert_allclose(got, want, atol=1e-5)


def test_monotone_cost_in_the_mask():
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=6)
    cost = block_macs(model)
    rng = stream(12, "mask")
    binary = (rng.random((6, 4)) < 0.5).astype(np.uint8)
    binary[-1] = 1
    from blockskip.executor import ExecutionStats
    base = ExecutionStats(computed=binary.astype(bool)).total_macs(cost)
    zeros = np.argwhere(binary == 0)
    for t, b in zeros:
        heavier = binary.copy()
        heavier[t, b] = 1
        total = ExecutionStats(computed=heavier.astype(bool)).total_macs(cost)
        assert total > base


def test_mask_shape_disagreement():
    model = make_toy_model(blocks=4, width=16, hidden=32, timesteps=10)
    schedule = make_schedule(10, 0.004, 0.25)
    mask = all_ones_mask(10, ["b0", "b1", "b2"])
    noise = np.zeros((1, 2), dtype=np.float32)
    with pytest.raises(MaskError, match="blocks"):
        run_masked_chain(model, noise, mask, schedule)
    mask = all_ones_mask(8, model.block_ids)
    with pytest.raises(MaskError, match="rows"):
        run_masked_chain(model, noise, mask, schedule)


def test_mask_invariants():
    scores = np.ones((4, 3), dtype=np.float32)
    binary = np.ones((4, 3), dtype=np.uint8)
    bad = binary.copy()
    bad[-1, 0] = 0
    with pytest.raises(MaskError, match="first sampling step"):
        MaskMatrix(scores=scores, binary=bad, block_ids=["a", "b", "c"]).validate()
    with pytest.raises(MaskError, match=r"\[0, 1\]"):
        MaskMatrix(scores=scores + 1, binary=binary, block_ids=["a", "b", "c"]).validate()
    with pytest.raises(MaskError, match="0 or 1"):
        MaskMatrix(scores=scores, binary=binary + 4, block_ids=["a", "b", "c"]).validate()


def test_mask_json_round_trip(tmp_path):
    rng = stream(13, "mask")
    scores = rng.random((5, 3)).astype(np.float32)
    scores[-1] = 1.0
    binary = (scores > 0.5).astype(np.uint8)
    binary[-1] = 1
    mask = MaskMatrix(scores=scores, binary=binary, block_ids=["b0", "b1", "b2"],
                      rectified=True, metadata={"lambda1": 0.02, "seed": 7})
    path = mask.save(tmp_path / "mask.json")
    loaded = MaskMatrix.load(path)
    np.testing.assert_array_equal(loaded.binary, mask.binary)
    np.testing.assert_allclose(loaded.scores, mask.scores, atol=1e-7)
    assert loaded.rectified and loaded.metadata["lambda1"] == 0.02
    assert loaded.block_ids == mask.block_ids


def test_stats_csv_export(tmp_path):
    model = make_toy_model(blocks=3, width=8, hidden=16, timesteps=4)
    schedule = make_schedule(4, 0.01, 0.3)
    mask = all_ones_mask(4, model.block_ids)
    noise = np.zeros((1, 2), dtype=np.float32)
    _, _, stats = run_masked_chain(model, noise, mask, schedule)
    path = stats.write_csv(tmp_path / "stats.csv", cost_model=block_macs(model))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,b,computed,macs"
    assert len(lines) == 1 + 4 * 3
