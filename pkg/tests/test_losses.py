"""Loss oracle suite: every derived value recomputed independently, plus
directional finite-difference gradient checks against autograd."""

import math

import numpy as np
import pytest
import torch

from emoconv import losses as L

FD_STEP = 1e-4
FD_REL_TOL = 1e-3


def tensor(x):
    return torch.tensor(x, dtype=torch.float64)


# ---------------------------------------------------------------------------
# Classification loss (cross-entropy)


def test_cls_exact_match_is_zero():
    q = tensor([0.0, 1.0, 0.0, 0.0, 0.0])
    assert float(L.classification_loss(q, q)) <= 1e-7


def test_cls_uniform_is_log_k():
    p = tensor([1.0, 0, 0, 0, 0])
    q = tensor([0.2] * 5)
    assert float(L.classification_loss(q, p)) == pytest.approx(math.log(5.0), abs=1e-9)


def test_cls_half_mass():
    p = tensor([1.0, 0, 0, 0, 0])
    q = tensor([0.5, 0.5, 0, 0, 0])
    assert float(L.classification_loss(q, p)) == pytest.approx(math.log(2.0), abs=1e-9)


def test_cls_batch_mean():
    q = tensor([[0.2] * 5, [1.0, 0, 0, 0, 0]])
    p = tensor([[1.0, 0, 0, 0, 0], [1.0, 0, 0, 0, 0]])
    assert float(L.classification_loss(q, p)) == pytest.approx(math.log(5.0) / 2, abs=1e-6)


def test_cls_shape_mismatch():
    with pytest.raises(ValueError):
        L.classification_loss(tensor([0.5, 0.5]), tensor([1.0, 0, 0]))


# ---------------------------------------------------------------------------
# Strength triplet loss


@pytest.mark.parametrize(
    "sx,sp,sn,expected",
    [
        (0.8, 0.7, 0.1, 1.0),  # max(0.1,0.5)+max(0.3,0.5)
        (1.0, 1.0, 0.0, 1.0),  # floor at delta1+delta2
        (0.0, 1.0, 1.0, 3.0),  # worst case: max(1,0.5)+max(2,0.5)
    ],
)
def test_strength_printed_form(sx, sp, sn, expected):
    got = L.strength_triplet_loss(tensor(sx), tensor(sp), tensor(sn))
    assert float(got) == pytest.approx(expected, abs=1e-12)


def test_strength_hinge_form():
    got = L.strength_triplet_loss(tensor(1.0), tensor(1.0), tensor(0.0), form="hinge")
    assert float(got) == pytest.approx(0.0, abs=1e-12)
    got = L.strength_triplet_loss(tensor(0.0), tensor(1.0), tensor(1.0), form="hinge")
    assert float(got) == pytest.approx(0.5 + 1.5, abs=1e-12)


def test_strength_first_term_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(200):
        sx, sp, sn = rng.uniform(0, 1, 3)
        a = L.strength_triplet_loss(tensor(sx), tensor(sp), tensor(sn))
        b = L.strength_triplet_loss(tensor(sp), tensor(sx), tensor(sn))
        # swapping s_x and s_pos leaves |s_x - s_pos| unchanged; isolate the
        # first term by subtracting the second
        second_a = max(1 - (sx - sn), 0.5)
        second_b = max(1 - (sp - sn), 0.5)
        assert float(a) - second_a == pytest.approx(float(b) - second_b, abs=1e-9)


def test_strength_floor_region():
    # minimum value delta1+delta2 exactly when |sx-sp| <= d1 and sx-sn >= 1-d2
    rng = np.random.default_rng(1)
    for _ in range(200):
        sx = rng.uniform(0.5, 1.0)
        sp = sx + rng.uniform(-0.5, 0.5)
        sn = sx - rng.uniform(0.5, 1.0)
        sp, sn = np.clip(sp, 0, 1), np.clip(sn, 0, 1)
        if abs(sx - sp) <= 0.5 and sx - sn >= 0.5:
            got = L.strength_triplet_loss(tensor(sx), tensor(sp), tensor(sn))
            assert float(got) == pytest.approx(1.0, abs=1e-9)


def test_strength_unknown_form():
    with pytest.raises(ValueError):
        L.strength_triplet_loss(tensor(0.5), tensor(0.5), tensor(0.5), form="wat")


# ---------------------------------------------------------------------------
# Frame similarity


def test_similarity_identical_frames_near_one():
    e = tensor([[[1.0, 2.0, 3.0]]])
    s = L.frame_similarity(e, e)
    assert float(s) == pytest.approx(1.0, abs=1e-6)


def test_similarity_orthogonal_zero():
    e = tensor([[[1.0, 0.0]]])
    c = tensor([[[0.0, 1.0]]])
    assert float(L.frame_similarity(e, c)) == pytest.approx(0.0, abs=1e-12)


def test_similarity_hand_cosines():
    e = tensor([[[1.0, 1.0], [1.0, 0.0]]])
    c = tensor([[[1.0, -1.0], [-1.0, 0.0]]])
    s = L.frame_similarity(e, c)[0]
    assert float(s[0]) == pytest.approx(0.0, abs=1e-9)
    assert float(s[1]) == pytest.approx(1.0, abs=1e-6)  # absolute value


def test_similarity_range():
    rng = np.random.default_rng(2)
    e = torch.from_numpy(rng.normal(size=(4, 20, 8)))
    c = torch.from_numpy(rng.normal(size=(4, 20, 8)))
    s = L.frame_similarity(e, c)
    assert ((s >= 0) & (s <= 1)).all()


def test_similarity_frame_count_mismatch():
    with pytest.raises(ValueError):
        L.frame_similarity(torch.randn(1, 4, 8), torch.randn(1, 5, 8))


# ---------------------------------------------------------------------------
# Disentanglement loss


def test_dis_zero_similarity():
    assert float(L.disentanglement_loss(tensor([1.0, 1.0]), tensor([0.0, 0.0]))) == 0.0


def test_dis_zero_cue():
    assert float(L.disentanglement_loss(tensor([0.0, 0.0]), tensor([0.9, 0.9]))) == 0.0


def test_dis_hand_example():
    got = L.disentanglement_loss(tensor([1.0, 0.5]), tensor([0.4, 0.8]))
    assert float(got) == pytest.approx(0.4, abs=1e-12)


def test_dis_monotone_in_similarity():
    rng = np.random.default_rng(3)
    cue = torch.from_numpy(rng.uniform(0, 1, 16))
    s = torch.from_numpy(rng.uniform(0, 1, 16))
    base = float(L.disentanglement_loss(cue, s))
    bumped = s.clone()
    bumped[5] += 0.1
    assert float(L.disentanglement_loss(cue, bumped)) >= base


# ---------------------------------------------------------------------------
# Reconstruction / content consistency (mean L1)


def test_rec_identical():
    x = torch.randn(3, 7, dtype=torch.float64)
    assert float(L.reconstruction_loss(x, x)) == 0.0


def test_rec_offset_by_one():
    x = torch.randn(4, 5, dtype=torch.float64)
    assert float(L.reconstruction_loss(x + 1.0, x)) == pytest.approx(1.0, abs=1e-12)


def test_rec_hand_2x2():
    out = tensor([[0.0, 1.0], [2.0, 3.0]])
    target = tensor([[1.0, 1.0], [1.0, 1.0]])
    assert float(L.reconstruction_loss(out, target)) == pytest.approx(1.0, abs=1e-12)


def test_cc_same_semantics_as_rec():
    a = torch.randn(2, 6, 4, dtype=torch.float64)
    b = torch.randn(2, 6, 4, dtype=torch.float64)
    assert float(L.content_consistency_loss(a, b)) == pytest.approx(
        float(torch.abs(a - b).mean()), abs=1e-12
    )


# ---------------------------------------------------------------------------
# Category consistency (KL)


def test_ecc_identical_zero():
    q = tensor([0.1, 0.2, 0.3, 0.25, 0.15])
    assert float(L.category_consistency_loss(q, q)) == 0.0


def test_ecc_onehot_vs_uniform():
    q_y = tensor([1.0, 0, 0, 0, 0])
    q_z = tensor([0.2] * 5)
    assert float(L.category_consistency_loss(q_y, q_z)) == pytest.approx(
        math.log(5.0), abs=1e-5
    )


def test_ecc_nonnegative_random_simplex():
    rng = np.random.default_rng(4)
    for _ in range(2000):
        q_y = rng.dirichlet(np.ones(5))
        q_z = rng.dirichlet(np.ones(5))
        assert float(L.category_consistency_loss(tensor(q_y), tensor(q_z))) >= 0.0


# ---------------------------------------------------------------------------
# Strength consistency


def test_esc_values():
    assert float(L.strength_consistency_loss(tensor(0.5), tensor(0.5))) == 0.0
    assert float(L.strength_consistency_loss(tensor(1.0), tensor(0.0))) == 1.0
    assert float(L.strength_consistency_loss(tensor(0.7), tensor(0.4))) == pytest.approx(
        0.09, abs=1e-12
    )


# ---------------------------------------------------------------------------
# Stage totals


def test_stage_one_total_weighted_sum():
    one = tensor(1.0)
    got = L.stage_one_total(one, one, one, one, L.StageOneWeights())
    assert float(got) == pytest.approx(3.2, abs=1e-12)
    zero = tensor(0.0)
    assert float(L.stage_one_total(zero, zero, zero, zero)) == 0.0


def test_stage_one_total_names_nan_term():
    one = tensor(1.0)
    with pytest.raises(L.NonFiniteLossError, match="dis"):
        L.stage_one_total(one, one, tensor(float("nan")), one)


def test_stage_two_total():
    one = tensor(1.0)
    got = L.stage_two_total(one, one, one, one, L.StageTwoWeights())
    assert float(got) == pytest.approx(1.0006, abs=1e-12)
    zero = tensor(0.0)
    assert float(L.stage_two_total(zero, zero, zero, zero)) == 0.0
    got = L.stage_two_total(one, one, one, one, L.StageTwoWeights(lambda_c=0.0))
    assert float(got) == pytest.approx(1.0, abs=1e-12)


def test_stage_two_total_names_inf_term():
    one = tensor(1.0)
    with pytest.raises(L.NonFiniteLossError, match="esc"):
        L.stage_two_total(one, one, one, tensor(float("inf")))


# ---------------------------------------------------------------------------
# Non-negativity across all losses


def test_all_losses_nonnegative_random():
    rng = np.random.default_rng(5)
    for _ in range(300):
        q = torch.from_numpy(rng.dirichlet(np.ones(5)))
        p = torch.zeros(5, dtype=torch.float64)
        p[rng.integers(5)] = 1.0
        assert float(L.classification_loss(q, p)) >= 0.0
        s3 = rng.uniform(0, 1, 3)
        assert float(L.strength_triplet_loss(*map(tensor, s3))) >= 0.0
        e = torch.from_numpy(rng.normal(size=(6, 4)))
        c = torch.from_numpy(rng.normal(size=(6, 4)))
        assert float(L.disentanglement_loss(torch.from_numpy(rng.uniform(0, 1, 6)), L.frame_similarity(e, c))) >= 0.0
        assert float(L.reconstruction_loss(e, c)) >= 0.0
        assert float(L.strength_consistency_loss(tensor(s3[0]), tensor(s3[1]))) >= 0.0


# ---------------------------------------------------------------------------
# Gradient suite: autograd vs central finite differences
#
# Directional derivative along a random unit vector, compared at 100 random
# points per loss, relative error < 1e-3, resampling away from the kink
# manifolds of max / ReLU / |.| / clamp.


def directional_check(fn, inputs, rng, rel_tol=FD_REL_TOL, h=FD_STEP):
    """Compare autograd directional derivative with central differences."""
    leaves = [x.clone().detach().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    directions = [torch.from_numpy(rng.normal(size=tuple(x.shape))) for x in inputs]
    norm = math.sqrt(sum(float((d * d).sum()) for d in directions))
    directions = [d / norm for d in directions]

    analytic = sum(
        float((g * d).sum()) for g, d in zip(grads, directions) if g is not None
    )
    plus = fn(*[x + h * d for x, d in zip(inputs, directions)])
    minus = fn(*[x - h * d for x, d in zip(inputs, directions)])
    numeric = (float(plus) - float(minus)) / (2 * h)
    scale = max(abs(analytic), abs(numeric), 1e-6)
    assert abs(analytic - numeric) / scale < rel_tol, (
        f"analytic {analytic} vs numeric {numeric}"
    )


def away_from(value, kinks, margin=0.01):
    return all(abs(value - k) > margin for k in kinks)


def test_grad_classification():
    rng = np.random.default_rng(10)
    for _ in range(100):
        q = torch.from_numpy(rng.dirichlet(np.ones(5)) * 0.9 + 0.02)
        p = torch.zeros(5, dtype=torch.float64)
        p[rng.integers(5)] = 1.0
        directional_check(lambda a: L.classification_loss(a, p), [q], rng)


def test_grad_strength_triplet():
    rng = np.random.default_rng(11)
    done = 0
    while done < 100:
        sx, sp, sn = rng.uniform(0.02, 0.98, 3)
        # kinks: |sx-sp| at 0 and at delta1; 1-(sx-sn) at delta2
        if not away_from(abs(sx - sp), [0.0, 0.5]) or not away_from(1 - (sx - sn), [0.5]):
            continue
        directional_check(
            lambda a, b, c: L.strength_triplet_loss(a, b, c),
            [tensor(sx), tensor(sp), tensor(sn)],
            rng,
        )
        done += 1


def test_grad_frame_similarity():
    rng = np.random.default_rng(12)
    done = 0
    while done < 100:
        e = torch.from_numpy(rng.normal(size=(5, 6)))
        c = torch.from_numpy(rng.normal(size=(5, 6)))
        cos = (e * c).sum(-1) / (e.norm(dim=-1) * c.norm(dim=-1))
        if float(cos.abs().min()) < 0.05:  # |.| kink at zero cosine
            continue
        weights = torch.from_numpy(rng.normal(size=5))  # random scalarization
        directional_check(
            lambda a, b: (L.frame_similarity(a, b) * weights).sum(), [e, c], rng
        )
        done += 1


def test_grad_disentanglement():
    rng = np.random.default_rng(13)
    for _ in range(100):
        cue = torch.from_numpy(rng.uniform(0, 1, 8))
        s = torch.from_numpy(rng.uniform(0, 1, 8))
        directional_check(L.disentanglement_loss, [cue, s], rng)


def test_grad_reconstruction():
    rng = np.random.default_rng(14)
    done = 0
    while done < 100:
        a = torch.from_numpy(rng.normal(size=(4, 6)))
        b = torch.from_numpy(rng.normal(size=(4, 6)))
        if float((a - b).abs().min()) < 0.01:  # |.| kink at equality
            continue
        directional_check(L.reconstruction_loss, [a, b], rng)
        done += 1


def test_grad_content_consistency():
    rng = np.random.default_rng(15)
    done = 0
    while done < 100:
        a = torch.from_numpy(rng.normal(size=(3, 5)))
        b = torch.from_numpy(rng.normal(size=(3, 5)))
        if float((a - b).abs().min()) < 0.01:
            continue
        directional_check(L.content_consistency_loss, [a, b], rng)
        done += 1


def test_grad_category_consistency():
    rng = np.random.default_rng(16)
    for _ in range(100):
        q_y = torch.from_numpy(rng.dirichlet(np.ones(5)) * 0.9 + 0.02)
        q_z = torch.from_numpy(rng.dirichlet(np.ones(5)) * 0.9 + 0.02)
        directional_check(L.category_consistency_loss, [q_y, q_z], rng)


def test_grad_strength_consistency():
    rng = np.random.default_rng(17)
    for _ in range(100):
        directional_check(
            L.strength_consistency_loss,
            [tensor(rng.uniform(0, 1)), tensor(rng.uniform(0, 1))],
            rng,
        )


def test_grad_stage_one_total():
    rng = np.random.default_rng(18)
    for _ in range(100):
        parts = [tensor(v) for v in rng.uniform(0.1, 2.0, 4)]
        directional_check(lambda *p: L.stage_one_total(*p), parts, rng)


def test_grad_stage_two_total():
    rng = np.random.default_rng(19)
    for _ in range(100):
        parts = [tensor(v) for v in rng.uniform(0.1, 2.0, 4)]
        directional_check(lambda *p: L.stage_two_total(*p), parts, rng)
