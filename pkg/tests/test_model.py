import numpy as np
import pytest
import torch

from emoconv import model as M
from emoconv.dsp import MelConfig, MelSpectrogram


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(1234)
    return M.ConversionModel(M.ModelConfig()).eval()


def random_mel(t=96, seed=0):
    rng = np.random.default_rng(seed)
    return MelSpectrogram(frames=rng.normal(-5, 2, (t, 80)), config=MelConfig())


# ---------------------------------------------------------------------------
# Encoders


def test_content_encoder_shape(net):
    with torch.no_grad():
        out = net.content_encoder(torch.randn(1, 128, 80))
    assert tuple(out.shape) == (1, 128, 64)


def test_content_encoder_downsampled_shape():
    torch.manual_seed(0)
    cfg = M.ModelConfig(content_downsample=2)
    enc = M.ContentEncoder(cfg)
    with torch.no_grad():
        out = enc(torch.randn(1, 128, 80))
    assert tuple(out.shape) == (1, 64, 64)


def test_encoders_deterministic_in_inference(net):
    x = torch.randn(1, 64, 80)
    with torch.no_grad():
        a1, a2 = net.content_encoder(x), net.content_encoder(x)
        b1, b2 = net.emotion_encoder(x), net.emotion_encoder(x)
    assert torch.equal(a1, a2) and torch.equal(b1, b2)


def test_emotion_encoder_frame_aligned(net):
    for t in (17, 64, 128):
        with torch.no_grad():
            out = net.emotion_encoder(torch.randn(1, t, 80))
        assert tuple(out.shape) == (1, t, 64)


def test_batch_rows_independent(net):
    x = torch.randn(1, 80, 80)
    pair = torch.cat([x, x])
    with torch.no_grad():
        single = net.convert_batch(x, x, torch.tensor([1]))
        both = net.convert_batch(pair, pair, torch.tensor([1, 1]))
    assert torch.equal(both[0], both[1])  # same-batch copies identical bitwise
    assert torch.allclose(both[0], single[0], atol=1e-6)  # batch size independent


def test_finite_outputs_fuzz(net):
    rng = np.random.default_rng(9)
    for _ in range(10):
        t = int(rng.integers(8, 200))
        x = torch.from_numpy(rng.normal(-5, 3, (2, t, 80)).astype(np.float32))
        with torch.no_grad():
            z = net.convert_batch(x, x, torch.tensor([0, 3]))
            q, s = net.recognition(net.emotion_encoder(x))
        assert torch.isfinite(z).all() and torch.isfinite(q).all() and torch.isfinite(s).all()


# ---------------------------------------------------------------------------
# Recognition head


def test_zero_feature_gives_uniform_distribution(net):
    with torch.no_grad():
        q, s = net.recognition(torch.zeros(1, 9, 64))
    assert torch.allclose(q, torch.full((1, 5), 0.2), atol=1e-7)
    assert float(s) == pytest.approx(0.5, abs=1e-7)


def test_recognition_ranges(net):
    rng = np.random.default_rng(2)
    for _ in range(50):
        e = torch.from_numpy(rng.normal(0, 4, (3, 20, 64)).astype(np.float32))
        with torch.no_grad():
            q, s = net.recognition(e)
        assert torch.allclose(q.sum(dim=-1), torch.ones(3), atol=1e-6)
        assert ((s >= 0) & (s <= 1)).all()


def test_doubling_features_keeps_argmax():
    torch.manual_seed(7)
    cfg = M.ModelConfig()
    head = M.RecognitionNetwork(cfg)
    e = torch.randn(4, 12, 64)
    with torch.no_grad():
        q1, _ = head(e)
        q2, _ = head(2 * e)
    assert torch.equal(q1.argmax(dim=-1), q2.argmax(dim=-1))


# ---------------------------------------------------------------------------
# Emotional cue (class-activation attention)


def test_cue_hand_example():
    e = torch.tensor([[[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0]]])
    theta = torch.tensor([[1.0, 0.0]])
    cue = M.emotional_cue(e, theta)
    assert torch.allclose(cue, torch.tensor([[0.5, 1.0, 0.0]]))


def test_cue_orthogonal_weight_all_zero():
    e = torch.tensor([[[1.0, 0.0], [2.0, 0.0]]])
    theta = torch.tensor([[0.0, 1.0]])
    cue = M.emotional_cue(e, theta)
    assert torch.equal(cue, torch.zeros(1, 2))


def test_cue_normalization_contract_random():
    rng = np.random.default_rng(0)
    e = torch.from_numpy(rng.normal(size=(500, 12, 8)))
    theta = torch.from_numpy(rng.normal(size=(500, 8)))
    cue = M.emotional_cue(e, theta)
    assert ((cue >= 0) & (cue <= 1)).all()
    peaks = cue.max(dim=-1).values
    assert ((peaks == 1.0) | (peaks == 0.0)).all()


# ---------------------------------------------------------------------------
# Calibration


def test_calibrate_hand_example():
    e = torch.tensor([[[1.0, 0.0], [0.0, 2.0]]])
    cue = torch.tensor([[1.0, 0.5]])
    out = M.calibrate(e, cue)
    assert torch.allclose(out, torch.tensor([[0.5, 0.5]]))


def test_calibrate_zero_cue():
    e = torch.randn(1, 6, 8)
    assert torch.equal(M.calibrate(e, torch.zeros(1, 6)), torch.zeros(1, 8))


def test_calibrate_all_ones_is_mean():
    e = torch.randn(2, 5, 8, dtype=torch.float64)
    out = M.calibrate(e, torch.ones(2, 5, dtype=torch.float64))
    assert torch.allclose(out, e.mean(dim=1))


def test_calibrate_linearity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        e1 = torch.from_numpy(rng.normal(size=(1, 9, 16)))
        e2 = torch.from_numpy(rng.normal(size=(1, 9, 16)))
        cue = torch.from_numpy(rng.uniform(0, 1, size=(1, 9)))
        a, b = rng.normal(), rng.normal()
        lhs = M.calibrate(a * e1 + b * e2, cue)
        rhs = a * M.calibrate(e1, cue) + b * M.calibrate(e2, cue)
        assert torch.allclose(lhs, rhs, atol=1e-5)


def test_calibrate_length_mismatch():
    with pytest.raises(M.ShapeMismatchError):
        M.calibrate(torch.randn(1, 6, 8), torch.zeros(1, 5))


# ---------------------------------------------------------------------------
# Generation / conversion


def test_generator_shape_contract(net):
    with torch.no_grad():
        out = net.generator(torch.randn(1, 128, 64), torch.randn(1, 64), 128)
    assert tuple(out.shape) == (1, 128, 80)


def test_generator_rejects_wrong_widths(net):
    with pytest.raises(M.ShapeMismatchError):
        net.generator(torch.randn(1, 16, 32), torch.randn(1, 64), 16)


def test_swapping_emotion_changes_output(net):
    x = torch.randn(1, 64, 80)
    c = net.content_encoder(x)
    with torch.no_grad():
        a = net.generator(c, torch.full((1, 64), 0.5), 64)
        b = net.generator(c, torch.full((1, 64), -0.5), 64)
    assert not torch.equal(a, b)


def test_convert_output_frames_match_source(net):
    x, y = random_mel(t=77, seed=1), random_mel(t=130, seed=2)
    z = M.convert(net, x, y)
    assert z.n_frames == 77


def test_convert_self_equals_reconstruction_bitwise(net):
    x = random_mel(t=50, seed=3)
    a = M.convert(net, x, x, reference_class=2)
    b = M.reconstruct(net, x, class_index=2)
    assert np.array_equal(a.frames, b.frames)


def test_class_for_cue_modes(net):
    x = random_mel(seed=4)
    assert M.class_for_cue(net, x, ground_truth=3) == 3
    predicted = M.class_for_cue(net, x)
    q = M.recognize(net, x).class_probs
    assert predicted == int(np.argmax(q))


def test_class_for_cue_tie_breaks_low_index():
    # numpy argmax picks the first maximum; verify the convention directly
    q = np.array([0.3, 0.3, 0.2, 0.1, 0.1])
    assert int(np.argmax(q)) == 0


# ---------------------------------------------------------------------------
# Checkpoints


def test_checkpoint_roundtrip(tmp_path, net):
    x = random_mel(seed=6)
    before = M.convert(net, x, x, reference_class=0)
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(path, model=net, meta={"kind": "model"})
    raw = path.read_bytes()
    assert raw[:9] == b"AINNCKPT1"
    restored = M.load_checkpoint(path).build_model()
    after = M.convert(restored, x, x, reference_class=0)
    assert np.array_equal(before.frames, after.frames)


def test_checkpoint_embeds_config(tmp_path, net):
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(path, model=net, train_config={"stage": 1, "lr": 1e-3})
    ckpt = M.load_checkpoint(path)
    assert ckpt.model_config == net.cfg
    assert ckpt.train_config == {"stage": 1, "lr": 0.001}


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"WRONGMAGIC" + b"\0" * 32)
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(p)


def test_checkpoint_missing_parameter(tmp_path, net):
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(path, model=net)
    ckpt = M.load_checkpoint(path)
    del ckpt.arrays["generator.out.bias"]
    with pytest.raises(M.CheckpointError, match="generator.out.bias"):
        ckpt.build_model()
