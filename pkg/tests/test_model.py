import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mesp import model as M
from mesp import tensor_core as tc
from mesp.ledger import Workspace
from oracles import naive_ce, naive_logits, numeric_grad


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def small_cfg(**kw):
    base = dict(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab=19, lora_rank=2, lora_alpha=4.0, max_seq=12)
    base.update(kw)
    return M.ModelConfig(**base)


# --- config ---

@pytest.mark.parametrize("kw, msg", [
    (dict(d_model=10, n_heads=4), "divisible"),
    (dict(lora_rank=0), "lora_rank"),
    (dict(lora_rank=9), "half"),
    (dict(n_layers=0), "n_layers"),
    (dict(eps=0.0), "eps"),
])
def test_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        small_cfg(**kw)


def test_init_has_seven_sites_and_fresh_adapters():
    p = M.init_params(small_cfg(), 0)
    for bp in p.blocks:
        assert tuple(bp.lora) == M.SITES
        assert all(not bp.lora[s].B.any() for s in M.SITES)
        assert all(bp.lora[s].A.any() for s in M.SITES)
    assert len(p.trainable()) == 2 * 7 * 2


# --- lora linear ---

def test_lora_forward_examples():
    rng = np.random.default_rng(0)
    x, W0 = rng.standard_normal((1, 2, 4)), rng.standard_normal((4, 4))
    ad = M.LoraAdapter(rng.standard_normal((4, 2)), np.zeros((2, 4)), 2.0)
    assert np.array_equal(M.lora_linear_forward(x, W0, ad)[0], x @ W0)
    assert not M.lora_linear_forward(np.zeros_like(x), W0, ad)[0].any()
    ad.B = rng.standard_normal((2, 4))
    W0 = np.eye(4)
    y, h = M.lora_linear_forward(x, W0, ad, keep_h=True)
    assert np.allclose(y, x @ W0 + 2 * (x @ (ad.A @ ad.B)), atol=1e-13)
    assert np.array_equal(h, x @ ad.A)


def test_lora_forward_shape_error():
    ad = M.LoraAdapter(np.zeros((4, 2)), np.zeros((2, 3)), 1.0)
    with pytest.raises(ValueError):
        M.lora_linear_forward(np.zeros((1, 2, 5)), np.zeros((4, 3)), ad)


def test_lora_backward_trivial():
    rng = np.random.default_rng(1)
    x, W0 = rng.standard_normal((1, 3, 4)), rng.standard_normal((4, 4))
    ad = M.LoraAdapter(rng.standard_normal((4, 2)), rng.standard_normal((2, 4)), 0.5)
    dA, dB, dx = M.lora_linear_backward(np.zeros((1, 3, 4)), x, W0, ad)
    assert not (dA.any() or dB.any() or dx.any())
    ad.B[:] = 0
    dA, dB, _ = M.lora_linear_backward(rng.standard_normal((1, 3, 4)), x, W0, ad)
    assert not dA.any() and dB.any()


def test_lora_backward_fd_and_stored_h_identity():
    rng = np.random.default_rng(2)
    x, W0 = rng.standard_normal((1, 3, 4)), rng.standard_normal((4, 4))
    ad = M.LoraAdapter(rng.standard_normal((4, 2)), rng.standard_normal((2, 4)), 0.5)
    g = rng.standard_normal((1, 3, 4))
    f = lambda: float(np.sum(g * M.lora_linear_forward(x, W0, ad)[0]))
    dA, dB, dx = M.lora_linear_backward(g, x, W0, ad)
    assert rel(dA, numeric_grad(f, ad.A, 1e-4)) < 1e-6
    assert rel(dB, numeric_grad(f, ad.B, 1e-4)) < 1e-6
    assert rel(dx, numeric_grad(f, x, 1e-4)) < 1e-6
    stored = M.lora_linear_backward(g, x, W0, ad, h=x @ ad.A)
    for a, b in zip((dA, dB, dx), stored):
        assert np.array_equal(a, b)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_lora_backward_h_stored_or_recomputed_bit_identical(seed):
    rng = np.random.default_rng(seed)
    x, W0 = rng.standard_normal((2, 5, 6)), rng.standard_normal((6, 3))
    ad = M.LoraAdapter(rng.standard_normal((6, 2)), rng.standard_normal((2, 3)), 1.5)
    g = rng.standard_normal((2, 5, 3))
    a = M.lora_linear_backward(g, x, W0, ad)
    b = M.lora_linear_backward(g, x, W0, ad, h=np.matmul(x, ad.A))
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_lora_backward_rejects_wrong_h():
    ad = M.LoraAdapter(np.zeros((4, 2)), np.zeros((2, 4)), 1.0)
    with pytest.raises(ValueError, match="h"):
        M.lora_linear_backward(np.zeros((1, 3, 4)), np.zeros((1, 3, 4)), np.zeros((4, 4)), ad, h=np.zeros((1, 3, 3)))


# --- attention ---

def test_attention_examples():
    rng = np.random.default_rng(3)
    Q, K, V = (rng.standard_normal((1, 1, 1, 4)) for _ in range(3))
    out, alpha = M.attention_forward(Q, K, V)
    assert np.array_equal(alpha, [[[[1.0]]]]) and np.array_equal(out, V)
    Q, K = rng.standard_normal((1, 1, 3, 4)), rng.standard_normal((1, 1, 3, 4))
    assert not M.attention_forward(Q, K, np.zeros((1, 1, 3, 4)))[0].any()
    # n=2 by hand: row 0 sees only itself, row 1 mixes both
    Q = np.array([[[[1.0, 0], [0, 1]]]])
    K = np.array([[[[1.0, 1], [2, 0]]]])
    V = np.array([[[[1.0, 2], [3, 4]]]])
    out, _ = M.attention_forward(Q, K, V)
    s = np.array([1.0, 0.0]) / np.sqrt(2)
    w = np.exp(s) / np.exp(s).sum()
    assert np.allclose(out[0, 0, 0], [1, 2], atol=1e-15)
    assert np.allclose(out[0, 0, 1], w[0] * V[0, 0, 0] + w[1] * V[0, 0, 1], atol=1e-15)


def test_attention_backward_trivial():
    rng = np.random.default_rng(4)
    Q, K, V = (rng.standard_normal((1, 2, 3, 4)) for _ in range(3))
    _, alpha = M.attention_forward(Q, K, V)
    assert not any(t.any() for t in M.attention_backward(np.zeros_like(Q), Q, K, V, alpha))
    Q, K, V = (rng.standard_normal((1, 1, 1, 4)) for _ in range(3))
    _, alpha = M.attention_forward(Q, K, V)
    dout = rng.standard_normal(Q.shape)
    dQ, dK, dV = M.attention_backward(dout, Q, K, V, alpha)
    assert not dQ.any() and not dK.any() and np.array_equal(dV, dout)


def test_attention_backward_fd():
    rng = np.random.default_rng(5)
    Q, K, V = (rng.standard_normal((1, 2, 4, 4)) for _ in range(3))
    R = rng.standard_normal(Q.shape)
    f = lambda: float(np.sum(R * M.attention_forward(Q, K, V)[0]))
    _, alpha = M.attention_forward(Q, K, V)
    for got, arr in zip(M.attention_backward(R, Q, K, V, alpha), (Q, K, V)):
        assert rel(got, numeric_grad(f, arr, 1e-4)) < 1e-6


def test_split_merge_roundtrip():
    t = np.arange(2 * 3 * 8.0).reshape(2, 3, 8)
    assert np.array_equal(M.merge_heads(M.split_heads(t, 4)), t)


# --- block ---

def _zero_attention(bp):
    for s in M.SITES:
        bp.lora[s].B[:] = 0
    for s in ("q", "k", "v", "o"):
        bp.w[s][:] = 0


def test_block_residual_passthrough():
    cfg = small_cfg(n_layers=1)
    bp = M.init_params(cfg, 0, init_std=0.3).blocks[0]
    _zero_attention(bp)
    x = np.random.default_rng(6).standard_normal((1, 4, cfg.d_model))
    a2 = x / np.sqrt(np.mean(x ** 2, -1, keepdims=True) + cfg.eps) * bp.gamma2
    g, u = a2 @ bp.w["gate"], a2 @ bp.w["up"]
    expected = x + (g / (1 + np.exp(-g)) * u) @ bp.w["down"]
    assert np.allclose(M.block_forward(x, bp, cfg), expected, atol=1e-13)
    for s in ("gate", "up", "down"):
        bp.w[s][:] = 0
    assert np.array_equal(M.block_forward(x, bp, cfg), x)


def test_block_causality():
    cfg = small_cfg(n_layers=1)
    bp = M.init_params(cfg, 1, init_std=0.3, lora_b_std=0.1).blocks[0]
    x = np.ones((1, 2, cfg.d_model))
    y0 = M.block_forward(x, bp, cfg)
    x[0, 1] = 5.0
    y1 = M.block_forward(x, bp, cfg)
    assert np.array_equal(y0[0, 0], y1[0, 0])
    assert not np.array_equal(y0[0, 1], y1[0, 1])


def test_block_modes_bit_identical():
    cfg = M.ModelConfig(n_layers=1, d_model=32, n_heads=4, d_ff=64, vocab=11, lora_rank=4, max_seq=8)
    bp = M.init_params(cfg, 7, lora_b_std=0.05).blocks[0]
    x = np.random.default_rng(7).standard_normal((1, 8, 32))
    ys = [M.block_forward(x, bp, cfg, mode) for mode in M.MODES]
    assert all(np.array_equal(ys[0], y) for y in ys[1:])


def test_block_mode_retention():
    cfg = small_cfg(n_layers=1)
    bp = M.init_params(cfg, 0).blocks[0]
    x = np.random.default_rng(0).standard_normal((1, 3, cfg.d_model))
    ws = Workspace()
    M.block_forward(x, bp, cfg, M.CHECKPOINT, ws)
    assert set(ws.slots) == {"y"}
    ws = Workspace()
    M.block_forward(x, bp, cfg, M.CHECKPOINT, ws, keep_h=True)
    assert set(ws.slots) == {"y"} | {f"h_{s}" for s in M.SITES}
    ws = Workspace()
    M.block_forward(x, bp, cfg, M.RECOMPUTE, ws)
    assert set(ws.slots) == M.RECOMPUTE_KEEP | {"y"}
    with pytest.raises(ValueError, match="unknown block mode"):
        M.block_forward(x, bp, cfg, "nope")


def test_block_backward_structured_zero_upstream():
    cfg = small_cfg(n_layers=1)
    bp = M.init_params(cfg, 2, lora_b_std=0.1).blocks[0]
    x = np.random.default_rng(2).standard_normal((1, 5, cfg.d_model))
    dX, grads = M.block_backward_structured(np.zeros_like(x), x, bp, cfg)
    assert not dX.any()
    assert all(not a.any() and not b.any() for a, b in grads.values())


def test_block_backward_structured_matches_store_all_bitwise():
    cfg = small_cfg(n_layers=1)
    bp = M.init_params(cfg, 3, lora_b_std=0.1).blocks[0]
    rng = np.random.default_rng(3)
    x, dY = rng.standard_normal((1, 6, cfg.d_model)), rng.standard_normal((1, 6, cfg.d_model))
    ws = Workspace()
    M.block_forward(x, bp, cfg, M.STORE_ALL, ws)
    ref_dX, ref = M.block_backward(dY, ws, bp, cfg)
    dX, grads = M.block_backward_structured(dY, x, bp, cfg)
    assert np.array_equal(dX, ref_dX)
    for s in M.SITES:
        assert np.array_equal(grads[s][0], ref[s][0]) and np.array_equal(grads[s][1], ref[s][1])


def test_block_backward_structured_needs_checkpoint():
    cfg = small_cfg(n_layers=1)
    bp = M.init_params(cfg, 0).blocks[0]
    with pytest.raises(KeyError, match="block 0"):
        M.block_backward_structured(np.zeros((1, 2, 16)), None, bp, cfg)


def test_block_backward_fd_dx():
    cfg = small_cfg(n_layers=1, d_model=8, d_ff=16)
    bp = M.init_params(cfg, 4, init_std=0.3, lora_b_std=0.3).blocks[0]
    rng = np.random.default_rng(4)
    x, R = rng.standard_normal((1, 4, 8)), rng.standard_normal((1, 4, 8))
    f = lambda: float(np.sum(R * M.block_forward(x, bp, cfg)))
    dX, grads = M.block_backward_structured(R, x, bp, cfg)
    assert rel(dX, numeric_grad(f, x, 1e-4)) < 1e-6
    for s in ("gate", "down"):
        assert rel(grads[s][0], numeric_grad(f, bp.lora[s].A, 1e-4)) < 1e-6


# --- whole model ---

def test_model_forward_shape_and_determinism():
    cfg = small_cfg()
    tokens = np.array([[3], [5]])
    a, _ = M.model_forward(tokens, M.init_params(cfg, 9))
    b, _ = M.model_forward(tokens, M.init_params(cfg, 9))
    assert a.shape == (2, 1, cfg.vocab)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("tied", [False, True])
def test_model_loss_matches_naive_reimplementation(tied):
    cfg = small_cfg(tie_embeddings=tied)
    p = M.init_params(cfg, 11, init_std=0.2, lora_b_std=0.1)
    rng = np.random.default_rng(11)
    tokens, targets = rng.integers(0, cfg.vocab, (1, 7)), rng.integers(0, cfg.vocab, (1, 7))
    logits, _ = M.model_forward(tokens, p)
    loss, _ = tc.cross_entropy(logits, targets)
    ref = naive_logits(tokens[0], p)
    assert np.allclose(logits[0], ref, rtol=0, atol=1e-12)
    assert abs(loss - naive_ce(ref, targets[0])) < 1e-12


def test_model_causality_by_perturbation():
    cfg = small_cfg()
    p = M.init_params(cfg, 12, init_std=0.2, lora_b_std=0.1)
    tokens = np.array([[1, 2, 3, 4, 5]])
    a, _ = M.model_forward(tokens, p)
    tokens[0, 3] = 17
    b, _ = M.model_forward(tokens, p)
    assert np.array_equal(a[0, :3], b[0, :3])
    assert not np.array_equal(a[0, 3], b[0, 3])


def test_fresh_adapters_equal_base_model():
    cfg = small_cfg()
    p = M.init_params(cfg, 13, init_std=0.2)
    tokens = np.array([[1, 4, 9, 16]])
    with_lora, _ = M.model_forward(tokens, p)
    base = p.copy()
    for bp in base.blocks:
        for s in M.SITES:
            bp.lora[s].A[:] = 0
    without, _ = M.model_forward(tokens, base)
    assert np.array_equal(with_lora, without)


def test_checkpoint_store_contents():
    cfg = small_cfg()
    p = M.init_params(cfg, 0)
    tokens = np.array([[1, 2, 3]])
    logits, store = M.model_forward(tokens, p, M.CHECKPOINT)
    assert sorted(store.inputs) == [0, 1] and not store.intermediates
    assert store.logits is logits
    _, store = M.model_forward(tokens, p, M.STORE_ALL)
    assert "alpha" in store.intermediates[0] and "h_q" in store.intermediates[1]


def test_embed_errors():
    p = M.init_params(small_cfg(), 0)
    with pytest.raises(ValueError, match="out of range"):
        M.embed(np.array([[0, 19]]), p)
    with pytest.raises(ValueError, match="max_seq"):
        M.embed(np.zeros((1, 13), dtype=int), p)
    with pytest.raises(ValueError):
        M.embed(np.zeros(3, dtype=int), p)


# --- snapshots ---

def test_snapshot_roundtrip_float32(tmp_path):
    cfg = small_cfg(dtype="float32")
    p = M.init_params(cfg, 14, lora_b_std=0.1)
    path = tmp_path / "snap.bin"
    M.save_snapshot(path, p.named_arrays())
    loaded = M.load_snapshot(path)
    assert list(loaded) == list(p.named_arrays())
    q = M.init_params(cfg, 99)
    applied = M.load_into(q, loaded, strict=True)
    assert len(applied) == len(loaded)
    for name, arr in q.named_arrays().items():
        assert np.array_equal(arr, p.named_arrays()[name])


def test_snapshot_layout_is_documented_format(tmp_path):
    path = tmp_path / "one.bin"
    M.save_snapshot(path, {"ab": np.array([[1.0, 2.0, 3.0]])})
    raw = path.read_bytes()
    assert raw[:4] == (2).to_bytes(4, "little") and raw[4:6] == b"ab"
    assert raw[6:10] == (2).to_bytes(4, "little")
    assert raw[10:18] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.array_equal(np.frombuffer(raw[18:], "<f4"), [1, 2, 3])


def test_snapshot_errors(tmp_path):
    path = tmp_path / "bad.bin"
    M.save_snapshot(path, {"x": np.zeros((2, 2))})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated"):
        M.load_snapshot(path)
    p = M.init_params(small_cfg(), 0)
    with pytest.raises(KeyError):
        M.load_into(p, {"nope": np.zeros(1)}, strict=True)
    assert M.load_into(p, {"nope": np.zeros(1)}) == []
    with pytest.raises(ValueError, match="shape"):
        M.load_into(p, {"final_gamma": np.zeros(3)})
