import math

import numpy as np
import pytest

from rwkv_unet.checkpoint import read_tensors
from rwkv_unet.data import SyntheticSpec, synthetic_batch
from rwkv_unet.losses import LossConfig, SegmentationBatch
from rwkv_unet.tensor import Tensor
from rwkv_unet.train import (
    AdamWState,
    DivergenceError,
    TrainConfig,
    adamw_step,
    augment_batch,
    clip_grad_norm,
    cosine_lr,
    read_summary,
    train,
)


def test_cosine_schedule():
    assert cosine_lr(0, 10, 1e-3, 1e-5) == pytest.approx(1e-3)
    assert cosine_lr(5, 10, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    assert cosine_lr(10, 10, 1e-3, 1e-5) == pytest.approx(1e-5)
    lrs = [cosine_lr(s, 50, 1.0, 0.0) for s in range(51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1.0, 0.0)


def adamw_oracle(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adamw_matches_scalar_oracle():
    t = Tensor(np.array([0.7]), requires_grad=True)
    state = AdamWState.create([("w", t)])
    grads = [0.3, -1.2, 0.05, 2.0]
    for g in grads:
        t.grad = np.array([g])
        adamw_step([("w", t)], state, 0.01, 0.1)
    assert t.data[0] == pytest.approx(adamw_oracle(0.7, grads, 0.01, 0.1), rel=1e-12)
    assert state.step == 4


def test_adamw_matches_torch(rng):
    torch = pytest.importorskip("torch")
    init = rng.standard_normal((3, 4))
    grads = [rng.standard_normal((3, 4)) for _ in range(5)]
    ref = torch.nn.Parameter(torch.from_numpy(init.copy()))
    opt = torch.optim.AdamW([ref], lr=3e-3, weight_decay=0.05)
    t = Tensor(init.copy(), requires_grad=True)
    state = AdamWState.create([("w", t)])
    for g in grads:
        ref.grad = torch.from_numpy(g.copy())
        opt.step()
        t.grad = g.copy()
        adamw_step([("w", t)], state, 3e-3, 0.05)
    np.testing.assert_allclose(t.data, ref.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_adamw_names_nonfinite_parameter():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    a.grad, b.grad = np.ones(2), np.array([1.0, np.nan])
    state = AdamWState.create([("a", a), ("b", b)])
    with pytest.raises(DivergenceError, match="'b'"):
        adamw_step([("a", a), ("b", b)], state, 1e-3, 0.0)
    np.testing.assert_array_equal(a.data, 1.0)  # nothing updated


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([a], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.8])


def test_augment_keeps_image_and_mask_aligned(rng):
    masks = rng.integers(0, 3, (6, 8, 8))
    images = np.stack([masks * 10.0, masks * -1.0], axis=1)
    ai, am = augment_batch(images, masks, rng)
    np.testing.assert_array_equal(ai[:, 0], am * 10.0)
    np.testing.assert_array_equal(ai[:, 1], am * -1.0)
    assert not np.array_equal(am, masks)


def tiny_data(count=3):
    return synthetic_batch(SyntheticSpec(count=count, resolution=32, class_count=2, seed=1))


def tiny_cfg(tmp_path=None, epochs=3, **kw):
    return TrainConfig(epochs=epochs, batch_size=2, lr_init=2e-3, loss=LossConfig(class_count=2),
                       variant="tiny", checkpoint_dir=str(tmp_path) if tmp_path else None, **kw)


def test_training_reduces_loss():
    r = train(tiny_cfg(epochs=6), tiny_data())
    assert len(r.history) == 6
    assert r.history[-1].loss < r.history[0].loss
    assert 0.0 <= r.final_dsc <= 1.0


def test_training_is_deterministic():
    a = train(tiny_cfg(epochs=2), tiny_data())
    b = train(tiny_cfg(epochs=2), tiny_data())
    assert [h.loss for h in a.history] == [h.loss for h in b.history]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    data = tiny_data()
    full = train(tiny_cfg(tmp_path / "full", augment=True), data)
    train(tiny_cfg(tmp_path / "cut", augment=True), data, stop_after=0)
    resumed = train(tiny_cfg(tmp_path / "cut", augment=True), data, resume=tmp_path / "cut" / "last.ckpt")
    assert [h.line() for h in resumed.history] == [h.line() for h in full.history]
    for (_, x), (_, y) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()
    log_lines = (tmp_path / "cut" / "train.log").read_text().splitlines()
    assert len(log_lines) == 3


def test_run_outputs(tmp_path):
    r = train(tiny_cfg(tmp_path, epochs=2), tiny_data())
    summary = read_summary(tmp_path / "run_summary.txt")
    assert summary["epochs_run"] == "2"
    assert float(summary["final_train_dsc"]) == pytest.approx(r.final_dsc)
    assert int(summary["params"]) == r.model.num_parameters()
    last = read_tensors(tmp_path / "last.ckpt")
    assert last["opt.step"][0] == 4  # 2 epochs x 2 batches
    assert (tmp_path / "best.ckpt").exists()


def test_divergence_is_reported():
    data = tiny_data(2)
    data.images[0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(tiny_cfg(epochs=1), data)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_init=1e-4, lr_min=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(dtype="float16")
    with pytest.raises(ValueError):
        TrainConfig(variant="huge")
    with pytest.raises(ValueError):
        train(tiny_cfg(), SegmentationBatch(np.zeros((1, 1, 32, 32)), np.zeros((1, 32, 32), int), 3))


def test_adamw_closed_forms():
    p = Tensor(np.array([1.0]), requires_grad=True)
    st_ = AdamWState.create([("p", p)])
    p.grad = np.array([1.0])
    adamw_step([("p", p)], st_, 0.1, 0.0)
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    q = Tensor(np.array([2.0]), requires_grad=True)
    st_ = AdamWState.create([("q", q)])
    q.grad = np.zeros(1)
    adamw_step([("q", q)], st_, 0.1, 0.0)
    assert q.data[0] == 2.0
    adamw_step([("q", q)], st_, 0.1, 0.1)
    assert q.data[0] == pytest.approx(2.0 * 0.99, rel=1e-15)


def test_logged_lr_follows_schedule():
    r = train(tiny_cfg(epochs=4), tiny_data(2))
    for h in r.history:
        assert h.lr == cosine_lr(h.epoch, 4, 2e-3, 0.0)


def test_equal_seeds_give_identical_checkpoints(tmp_path):
    data = tiny_data(2)
    train(tiny_cfg(tmp_path / "a", epochs=2), data)
    train(tiny_cfg(tmp_path / "b", epochs=2), data)
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()
