"""Model assembly, losses, optimizer, schedule, and short training runs."""

import numpy as np
import pytest

from conftest import randomize_params
from flashkit import Tensor
from flashkit.data import make_batches, synthetic_corpus
from flashkit.gradcheck import finite_difference_check
from flashkit.model import (ConfigError, ModelConfig, build_model, cross_entropy,
                            lm_loss, mask_tokens, mlm_loss)
from flashkit.optim import OptimConfig, OptimState, adamw_step, clip_local, lr_schedule
from flashkit.train import load_checkpoint, save_checkpoint, train_run
from flashkit.tensor import backward, record_tape

CORPUS = synthetic_corpus(120_000, seed=3)


def tiny_cfg(**kw):
    base = dict(d=16, layers=2, context=32, chunk=8, kind="flash", s=8)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# config and build
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(kind="flash", context=100, chunk=64)
    with pytest.raises(ConfigError):
        ModelConfig(kind="nope")
    with pytest.raises(ConfigError):
        ModelConfig(kind="transformer_pp", layers=3)
    assert ModelConfig(d=64).head_size == 64      # s = min(128, d)
    assert ModelConfig(d=256).head_size == 128
    assert ModelConfig(d=64, s=32).head_size == 32
    assert ModelConfig(d=64).e == 128


def test_build_deterministic():
    cfg = tiny_cfg()
    a = build_model(cfg, seed=11)
    b = build_model(cfg, seed=11)
    for name, p in a.params().items():
        assert np.array_equal(p.data, b.params()[name].data), name


def test_flash_with_full_chunk_matches_quadratic_model():
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 256, size=(2, 32))
    flash = build_model(tiny_cfg(chunk=32), seed=4)
    quad = build_model(tiny_cfg(kind="flash_quad"), seed=4)
    out_f = flash.forward(tokens).data
    out_q = quad.forward(tokens).data
    assert np.max(np.abs(out_f - out_q)) < 1e-6


def gau_layer_params(d, e, s, n):
    fused = d * (2 * e + s) + 2 * e + s
    heads_2 = 4 * s
    bias = 2 * n - 1 if n < 512 else 256
    out = e * d + d
    norm = 2 * d
    return norm + fused + heads_2 + bias + out


def test_param_count_closed_forms():
    d, t, c = 16, 32, 8
    e, s, v = 2 * d, 8, 256
    shared = v * d + 1 + 2 * d  # embedding + sin scalar + final layer norm

    m = build_model(tiny_cfg(kind="flash_quad"), seed=1)
    assert m.num_params() == shared + 2 * gau_layer_params(d, e, s, t)

    m = build_model(tiny_cfg(kind="flash"), seed=1)
    assert m.num_params() == shared + 2 * (gau_layer_params(d, e, s, c) + 4 * s)

    m = build_model(tiny_cfg(kind="linear"), seed=1)
    assert m.num_params() == shared + 2 * (gau_layer_params(d, e, s, 1) - 1)  # no bias

    m = build_model(tiny_cfg(kind="transformer_pp", heads=4), seed=1)
    mhsa = 2 * d + 4 * d * d + 4 * d
    glu = 2 * d + d * 8 * d + 8 * d + 4 * d * d + d
    assert m.num_params() == shared + mhsa + glu

    m = build_model(tiny_cfg(kind="mhsa_mlp", heads=4), seed=1)
    mlp = 2 * d + d * 4 * d + 4 * d + 4 * d * d + d
    assert m.num_params() == shared + mhsa + mlp


def test_untied_embedding_adds_projection():
    tied = build_model(tiny_cfg(), seed=1)
    untied = build_model(tiny_cfg(tied_embedding=False), seed=1)
    d, v = 16, 256
    assert untied.num_params() - tied.num_params() == d * v + v


def test_mlm_model_reserves_mask_row():
    m = build_model(tiny_cfg(causal=False), seed=1)
    assert m.embedding.shape[0] == 257
    assert m.cfg.mask_id == 256


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_cross_entropy_uniform_and_one_hot():
    logits = Tensor(np.zeros((2, 5, 256)))
    targets = np.random.default_rng(0).integers(0, 256, size=(2, 5))
    assert cross_entropy(logits, targets).item() == pytest.approx(np.log(256), abs=1e-12)
    sharp = np.full((1, 3, 7), -1e4)
    t2 = np.array([[1, 4, 6]])
    for i, tok in enumerate(t2[0]):
        sharp[0, i, tok] = 1e4
    assert cross_entropy(Tensor(sharp), t2).item() == pytest.approx(0.0, abs=1e-12)


def test_lm_loss_uniform_logits_is_log_vocab():
    m = build_model(tiny_cfg(), seed=2)
    for p in m.params().values():
        p.data = np.zeros_like(p.data)  # all-zero model: logits identically 0
    tokens = np.random.default_rng(1).integers(0, 256, size=(2, 32))
    assert lm_loss(m, tokens).item() == pytest.approx(np.log(256), abs=1e-12)


def test_lm_loss_matches_position_loop():
    m = build_model(tiny_cfg(kind="flash_quad", layers=1), seed=3)
    randomize_params(m.params().values(), np.random.default_rng(2), std=0.3)
    tokens = np.random.default_rng(3).integers(0, 256, size=(2, 32))
    got = lm_loss(m, tokens).item()
    logits = m.forward(tokens).data
    total = 0.0
    for b in range(2):
        for t in range(31):
            row = logits[b, t]
            row = row - row.max()
            total -= row[tokens[b, t + 1]] - np.log(np.exp(row).sum())
    assert got == pytest.approx(total / (2 * 31), rel=1e-10)


def test_lm_loss_rejects_non_causal():
    m = build_model(tiny_cfg(causal=False), seed=1)
    with pytest.raises(ConfigError):
        lm_loss(m, np.zeros((1, 32), dtype=np.int64))


def test_mlm_loss_uniform_logits_is_log_extended_vocab():
    m = build_model(tiny_cfg(causal=False), seed=2)
    for p in m.params().values():
        p.data = np.zeros_like(p.data)
    tokens = np.random.default_rng(1).integers(0, 256, size=(2, 32))
    loss = mlm_loss(m, tokens, np.random.default_rng(5))
    assert loss.item() == pytest.approx(np.log(257), abs=1e-12)


def test_mlm_loss_counts_masked_positions_only():
    m = build_model(tiny_cfg(causal=False, layers=1), seed=2)
    randomize_params(m.params().values(), np.random.default_rng(4), std=0.3)
    tokens = np.random.default_rng(6).integers(0, 256, size=(1, 32))
    rng = np.random.default_rng(7)
    got = mlm_loss(m, tokens, rng).item()
    corrupted, selected = mask_tokens(tokens, np.random.default_rng(7), 256, 256)
    logits = m.forward(corrupted).data
    total, count = 0.0, 0
    for t in range(32):
        if selected[0, t]:
            row = logits[0, t] - logits[0, t].max()
            total -= row[tokens[0, t]] - np.log(np.exp(row).sum())
            count += 1
    assert count == selected.sum()
    assert got == pytest.approx(total / count, rel=1e-10)


def test_mask_tokens_statistics():
    rng = np.random.default_rng(8)
    tokens = rng.integers(0, 256, size=(40, 256))  # ~1e4 positions
    corrupted, selected = mask_tokens(tokens, rng, 256, 256)
    rate = selected.mean()
    assert abs(rate - 0.15) < 0.01
    # of the selected: ~80% mask id, ~10% random, ~10% kept
    sel = selected.sum()
    masked = (corrupted[selected] == 256).mean()
    kept = (corrupted[selected] == tokens[selected]).mean()
    assert abs(masked - 0.8) < 0.05
    assert kept > 0.05  # 10% kept plus random draws that happen to match
    assert np.array_equal(corrupted[~selected], tokens[~selected])
    del sel


def test_loss_batch_permutation_equivariant():
    m = build_model(tiny_cfg(kind="flash_quad", layers=1), seed=4)
    tokens = np.random.default_rng(9).integers(0, 256, size=(4, 32))
    a = lm_loss(m, tokens).item()
    b = lm_loss(m, tokens[::-1].copy()).item()
    assert abs(a - b) < 1e-10


# ---------------------------------------------------------------------------
# schedule / clipping / AdamW
# ---------------------------------------------------------------------------


def test_lr_schedule_shape():
    cfg = OptimConfig(lr_peak=7e-4, warmup_steps=100, total_steps=2000)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(100, cfg) == pytest.approx(7e-4)
    assert lr_schedule(50, cfg) == pytest.approx(3.5e-4)
    mid = (100 + 2000) // 2
    assert lr_schedule(mid, cfg) == pytest.approx(7e-4 * (2000 - mid) / 1900)
    assert lr_schedule(2000, cfg) == 0.0
    assert lr_schedule(2400, cfg) == 0.0


def test_clip_local_per_tensor():
    g_small = np.full(4, 0.02)          # norm 0.04: untouched
    g_big = np.full(4, 0.5)             # norm 1.0: scaled to 0.1
    out = clip_local({"a": g_small, "b": g_big}, 0.1)
    assert np.array_equal(out["a"], g_small)
    assert np.linalg.norm(out["b"]) == pytest.approx(0.1)
    assert np.allclose(out["b"], g_big * 0.1)


def test_adamw_decay_only_when_grads_zero():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    params = {"w": p}
    state = OptimState.for_params(params)
    cfg = OptimConfig(lr_peak=1e-2, warmup_steps=1, total_steps=10 ** 6, weight_decay=0.01)
    before = p.data.copy()
    adamw_step(params, {"w": np.zeros(3)}, state, cfg)
    assert np.array_equal(p.data, before - 1e-2 * 0.01 * before)


def test_adamw_scalar_trajectory_matches_reference():
    cfg = OptimConfig(lr_peak=0.1, warmup_steps=1, total_steps=10 ** 6,
                      betas=(0.9, 0.999), eps=1e-6, weight_decay=0.01)
    p = Tensor(np.array(2.0), requires_grad=True)
    params = {"w": p}
    state = OptimState.for_params(params)
    # hand-rolled reference following the same schedule
    theta, m, v = 2.0, 0.0, 0.0
    for t in range(1, 4):
        g = 2.0 * theta  # gradient of theta^2 at the reference iterate
        adamw_step(params, {"w": np.array(2.0 * float(p.data))}, state, cfg)
        lr = lr_schedule(t, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        theta = theta - lr * (mh / (np.sqrt(vh) + 1e-6) + 0.01 * theta)
        assert float(p.data) == pytest.approx(theta, rel=1e-12), t


# ---------------------------------------------------------------------------
# end-to-end gradient and training
# ---------------------------------------------------------------------------


def test_lm_gradient_matches_fd_end_to_end():
    rng = np.random.default_rng(10)
    cfg = ModelConfig(d=8, layers=2, context=8, chunk=4, kind="flash", s=4)
    m = build_model(cfg, seed=6)
    params = list(m.params().values())
    randomize_params(params, rng, std=0.3)
    tokens = rng.integers(0, 256, size=(2, 8))

    def f():
        return lm_loss(m, tokens)

    assert finite_difference_check(f, params, probes=2, rng=rng) < 1e-4


@pytest.mark.parametrize("kernel", ["relu2", "softmax"])
def test_softmax_kernel_passes_causality_and_gradients(kernel):
    cfg = ModelConfig(d=8, layers=1, context=16, chunk=4, kind="flash_quad",
                      s=4, kernel=kernel)
    m = build_model(cfg, seed=7)
    rng = np.random.default_rng(11)
    randomize_params(m.params().values(), rng, std=0.3)
    tokens = rng.integers(0, 256, size=(1, 16))
    base = m.forward(tokens).data[0]
    pert = tokens.copy()
    pert[0, 9] = (pert[0, 9] + 3) % 256
    out = m.forward(pert).data[0]
    assert np.max(np.abs(out[:9] - base[:9])) <= 1e-6

    def f():
        return lm_loss(m, tokens)

    assert finite_difference_check(f, list(m.params().values()), probes=2, rng=rng) < 1e-4


def test_training_decreases_loss_and_is_deterministic():
    cfg = tiny_cfg(d=32, layers=2, context=64, chunk=16, kind="flash")
    opt = OptimConfig(warmup_steps=10, total_steps=50)
    r1 = train_run(cfg, CORPUS, steps=50, seed=13, optim_cfg=opt, batch_size=4)
    r2 = train_run(cfg, CORPUS, steps=50, seed=13, optim_cfg=opt, batch_size=4)
    assert r1.losses == r2.losses
    assert r1.losses[-1] < r1.losses[0]
    assert r1.lrs[9] == pytest.approx(7e-4)


def test_resume_continues_identical_trace(tmp_path):
    cfg = tiny_cfg()
    opt = OptimConfig(warmup_steps=5, total_steps=20)
    ck = str(tmp_path / "ck.npz")
    full = train_run(cfg, CORPUS, steps=20, seed=14, optim_cfg=opt, batch_size=2)
    train_run(cfg, CORPUS, steps=10, seed=14, optim_cfg=opt, batch_size=2,
              checkpoint_path=ck)
    resumed = train_run(cfg, CORPUS, steps=20, seed=14, optim_cfg=opt, batch_size=2,
                        resume_from=ck)
    assert resumed.losses == full.losses[10:]


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    m = build_model(cfg, seed=15)
    state = OptimState.for_params(m.params())
    state.step = 7
    path = str(tmp_path / "model.npz")
    save_checkpoint(path, m, state, step=7)
    restored, rstate, step = load_checkpoint(path)
    assert step == 7 and rstate.step == 7
    assert restored.cfg == cfg
    for name, p in m.params().items():
        assert np.array_equal(p.data, restored.params()[name].data), name
    tokens = np.random.default_rng(0).integers(0, 256, size=(1, 32))
    assert np.array_equal(m.forward(tokens).data, restored.forward(tokens).data)


def test_mlm_training_runs():
    cfg = tiny_cfg(causal=False)
    opt = OptimConfig(warmup_steps=5, total_steps=15)
    r = train_run(cfg, CORPUS, steps=15, seed=16, optim_cfg=opt, batch_size=2)
    assert len(r.losses) == 15
    assert all(np.isfinite(v) for v in r.losses)
