import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from kgreport.corpus import build_vocabulary
from kgreport.exceptions import ContractError
from kgreport.generator import KnowledgeReportModel, make_batch
from kgreport.encoders import ModelConfig
from kgreport.objectives import (
    TAU_RANGE,
    ContrastiveState,
    bce_loss,
    itc_loss,
    itm_loss,
    itm_pairs,
    lm_loss,
    total_loss,
)
from kgreport.optim import AdamW
from kgreport.tensor import Tensor, grad_check, l2_normalize

from oracles import loop_info_nce

VOCAB = build_vocabulary()


def unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- itc --------------------------------------------------------------------
def test_itc_single_candidate_is_zero():
    state = ContrastiveState(4, capacity=0)
    v = unit(np.random.default_rng(0), 1, 4)
    assert float(itc_loss(Tensor(v), Tensor(v), state).data) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("B,Q", [(1, 3), (4, 0), (3, 5)])
def test_itc_uniform_similarities_give_ln_n(B, Q):
    state = ContrastiveState(4, capacity=Q)
    e = np.zeros((B + Q, 4))
    e[:, 0] = 1.0  # every candidate identical -> equal similarities
    state.image_queue, state.text_queue = e[:Q].copy(), e[:Q].copy()
    loss = float(itc_loss(Tensor(e[:B]), Tensor(e[:B]), state, update_queue=False).data)
    assert abs(loss - math.log(B + Q)) < 1e-9


def test_itc_matches_loop_oracle_batch_4():
    rng = np.random.default_rng(1)
    img, txt = unit(rng, 4, 6), unit(rng, 4, 6)
    img_m, txt_m = unit(rng, 4, 6), unit(rng, 4, 6)
    state = ContrastiveState(6, capacity=8, temperature=0.1)
    state.image_queue, state.text_queue = unit(rng, 3, 6), unit(rng, 3, 6)
    got = float(itc_loss(Tensor(img), Tensor(txt), state, img_m, txt_m, update_queue=False).data)
    ref = loop_info_nce(img.tolist(), txt.tolist(),
                        np.vstack([img_m, state.image_queue]).tolist(),
                        np.vstack([txt_m, state.text_queue]).tolist(), 0.1)
    assert abs(got - ref) < 1e-10


def test_itc_rotation_invariance():
    rng = np.random.default_rng(2)
    img, txt = unit(rng, 5, 6), unit(rng, 5, 6)
    R = ortho_group.rvs(6, random_state=3)
    a = float(itc_loss(Tensor(img), Tensor(txt), ContrastiveState(6, 0)).data)
    b = float(itc_loss(Tensor(img @ R), Tensor(txt @ R), ContrastiveState(6, 0)).data)
    assert abs(a - b) < 1e-12


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_itc_decreases_when_positive_similarity_increases(seed):
    rng = np.random.default_rng(seed)
    img, txt = unit(rng, 3, 5), unit(rng, 3, 5)
    state = ContrastiveState(3, 0, temperature=0.5)

    def loss(sim):
        # image rows = similarity rows against one-hot text candidates, so sim[i, j] is the
        # i->j score; the text side sees the same matrix transposed
        return float(itc_loss(Tensor(sim), Tensor(np.eye(3)), state, sim, np.eye(3)).data)

    sim = img @ txt.T
    bumped = sim.copy()
    bumped[0, 0] += 0.1
    assert loss(bumped) < loss(sim)


def test_itc_updates_queue_after_loss():
    rng = np.random.default_rng(4)
    state = ContrastiveState(4, capacity=10)
    img, txt = unit(rng, 3, 4), unit(rng, 3, 4)
    itc_loss(Tensor(img), Tensor(txt), state)
    np.testing.assert_array_equal(state.image_queue, img)


def test_itc_nonpositive_temperature_is_contract_error():
    with pytest.raises(ContractError):
        ContrastiveState(4, temperature=0.0)
    state = ContrastiveState(4)
    state.temperature.data[...] = -1.0
    v = unit(np.random.default_rng(0), 2, 4)
    with pytest.raises(ContractError):
        itc_loss(Tensor(v), Tensor(v), state)


def test_queue_fifo_keeps_most_recent():
    rng = np.random.default_rng(5)
    state = ContrastiveState(3, capacity=7)
    batches = [unit(rng, 3, 3) for _ in range(4)]
    for b in batches:
        state.enqueue(b, -b)
    everything = np.vstack(batches)
    np.testing.assert_array_equal(state.image_queue, everything[-7:])
    np.testing.assert_array_equal(state.text_queue, -everything[-7:])


@settings(max_examples=30)
@given(st.integers(0, 12), st.integers(1, 5), st.integers(0, 6))
def test_queue_holds_min_q_bn(Q, n, B):
    state = ContrastiveState(2, capacity=Q)
    for i in range(B):
        state.enqueue(np.full((n, 2), float(i)), np.full((n, 2), float(i)))
    assert len(state.image_queue) == min(Q, B * n)
    if len(state.image_queue):
        assert state.image_queue[-1, 0] == B - 1


def test_tau_clamp():
    state = ContrastiveState(2)
    state.temperature.data[...] = 5.0
    state.clamp()
    assert state.tau == TAU_RANGE[1]
    state.temperature.data[...] = 1e-6
    state.clamp()
    assert state.tau == TAU_RANGE[0]


def test_itc_gradient_wrt_projections_and_temperature():
    rng = np.random.default_rng(6)
    raw_i, raw_t = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    state = ContrastiveState(4, capacity=4)
    state.image_queue, state.text_queue = unit(rng, 2, 4), unit(rng, 2, 4)
    img_m, txt_m = unit(rng, 3, 4), unit(rng, 3, 4)  # fixed targets, as from the momentum branch

    def f(x):
        return itc_loss(l2_normalize(x), l2_normalize(raw_t), state, img_m, txt_m,
                        update_queue=False)

    assert grad_check(f, raw_i) < 1e-4
    assert grad_check(lambda tau: itc_loss(l2_normalize(raw_i), l2_normalize(raw_t), state,
                                           img_m, txt_m, update_queue=False),
                      state.temperature) < 1e-4


# -- itm --------------------------------------------------------------------
def test_itm_certain_positive_contributes_zero():
    assert float(itm_loss(Tensor([[-800.0, 800.0]]), [1]).data) == pytest.approx(0.0, abs=1e-12)


def test_itm_half_is_ln2():
    loss = float(itm_loss(Tensor(np.zeros((6, 2))), [1, 0, 1, 0, 1, 0]).data)
    assert abs(loss - math.log(2)) < 1e-9


def test_itm_hand_two_sample_batch():
    logits = np.array([[0.2, 1.1], [0.7, -0.4]])
    # P(match) = sigmoid(l1 - l0) for the two-way softmax
    p1 = 1 / (1 + math.exp(-(1.1 - 0.2)))
    p2 = 1 / (1 + math.exp(-(-0.4 - 0.7)))
    expected = (-math.log(p1) - math.log(1 - p2)) / 2
    assert float(itm_loss(Tensor(logits), [1, 0]).data) == pytest.approx(expected, abs=1e-10)


def test_itm_shape_check():
    with pytest.raises(ContractError):
        itm_loss(Tensor(np.zeros((2, 3))), [0, 1])


def test_itm_pairs_balanced_and_mismatched():
    reports = ["a", "b", "a", "c"]
    neg, pos_only = itm_pairs(reports, np.random.default_rng(0))
    assert not pos_only and len(neg) == 4
    for i, j in enumerate(neg):
        assert reports[j] != reports[i]


def test_itm_pairs_batch_of_one_degrades():
    neg, pos_only = itm_pairs(["a"], np.random.default_rng(0))
    assert pos_only and len(neg) == 0


def test_itm_pairs_identical_reports_still_pick_other_index():
    neg, _ = itm_pairs(["a", "a", "a"], np.random.default_rng(0))
    assert all(j != i for i, j in enumerate(neg))


def test_itm_hard_negatives_follow_similarity():
    sim = np.array([[0.0, 50.0, -50.0], [50.0, 0.0, -50.0], [-50.0, 50.0, 0.0]])
    neg, _ = itm_pairs(["a", "b", "c"], np.random.default_rng(0), sim)
    assert neg.tolist() == [1, 0, 1]


# -- lm ---------------------------------------------------------------------
def test_lm_uniform_is_ln_v():
    loss = float(lm_loss(Tensor(np.zeros((2, 5, 40))), np.ones((2, 5), dtype=int) * 9).data)
    assert abs(loss - math.log(40)) < 1e-9


def test_lm_large_margin_goes_to_zero():
    logits = np.full((1, 3, 10), -100.0)
    targets = np.array([[3, 4, 5]])
    logits[0, [0, 1, 2], [3, 4, 5]] = 100.0
    assert float(lm_loss(Tensor(logits), targets).data) < 1e-12


def test_lm_three_token_hand_case_and_pad_exclusion():
    logits = np.array([[[1.0, 2.0, 0.5], [0.0, 0.0, 3.0], [2.0, 1.0, 1.0], [9.0, 9.0, 9.0]]])
    targets = np.array([[1, 2, 1, 0]])  # last step is [PAD]

    def nll(row, t):
        return -(row[t] - math.log(sum(math.exp(v) for v in row)))

    expected = (nll([1.0, 2.0, 0.5], 1) + nll([0.0, 0.0, 3.0], 2) + nll([2.0, 1.0, 1.0], 1)) / 3
    assert float(lm_loss(Tensor(logits), targets).data) == pytest.approx(expected, abs=1e-10)


def test_lm_all_pad_is_contract_error():
    with pytest.raises(ContractError):
        lm_loss(Tensor(np.zeros((1, 3, 5))), np.zeros((1, 3), dtype=int))


def test_lm_gradient():
    rng = np.random.default_rng(7)
    targets = np.array([[3, 1, 0], [2, 2, 4]])
    assert grad_check(lambda x: lm_loss(x, targets), Tensor(rng.normal(size=(2, 3, 5)))) < 1e-4


# -- bce --------------------------------------------------------------------
def test_bce_perfect_is_near_zero():
    y = np.array([1, 0] * 13 + [1], dtype=float)
    assert float(bce_loss(Tensor(y), y).data) <= -math.log(1 - 1e-7) + 1e-15


def test_bce_half_is_ln2():
    y = np.random.default_rng(0).integers(0, 2, 27)
    assert abs(float(bce_loss(Tensor(np.full(27, 0.5)), y).data) - math.log(2)) < 1e-9


def test_bce_hand_three_slots():
    expected = (-math.log(0.9) - math.log(0.9) - math.log(0.5)) / 3
    got = float(bce_loss(Tensor([0.9, 0.1, 0.5]), [1, 0, 1]).data)
    assert got == pytest.approx(expected, abs=1e-12)


def test_bce_gradient():
    y = np.array([1.0, 0.0, 1.0, 0.0])
    assert grad_check(lambda p: bce_loss(p, y), Tensor([0.3, 0.6, 0.8, 0.1])) < 1e-4


# -- total ------------------------------------------------------------------
def test_total_zero_and_sum():
    assert float(total_loss(0.0, 0.0, 0.0).total.data) == 0.0
    parts = total_loss(Tensor(0.3), Tensor(1.25), Tensor(2.5))
    assert float(parts.total.data) == pytest.approx(4.05, abs=1e-12)
    floats = parts.as_floats()
    assert abs(floats["total"] - (floats["l_itc"] + floats["l_itm"] + floats["l_lm"])) < 1e-9


# -- through the full model -------------------------------------------------
def _tiny_model(seed=0):
    cfg = ModelConfig(width=8, layers=1, heads=2, proj_dim=4, patch=8, image_side=16, max_len=16,
                      vocab_size=len(VOCAB), queue_size=4, dtype="float64")
    return KnowledgeReportModel(cfg, seed)


def _tiny_batch(seed=0):
    rng = np.random.default_rng(seed)
    reports = ["the heart is normal in size .", "there is a pleural effusion .", "normal chest ."]
    know = ["heart", "pleural [SEP] effusion", "[MASK-NEG]"]
    return make_batch(rng.random((3, 16, 16, 1)), reports, know, VOCAB, 16)


def test_all_losses_gradcheck_through_encoders():
    model = _tiny_model()
    batch = _tiny_batch()
    probe = {
        "vision patch": model.vision.patch_embed.weight,
        "knowledge attention": model.knowledge.layers[0].self_attn.q.weight,
        "fusion": model.fusion.attn.v.weight,
        "decoder self-attention": model.decoder.stack.layers[0].self_attn.k.weight,
        "itm head": model.itm_head.weight,
        "temperature": model.temperature,
    }
    for pick in ("l_itc", "l_itm", "l_lm", "total"):
        for name, param in probe.items():
            def f(_, pick=pick):
                parts, _ = model.losses(batch, np.random.default_rng(1))
                return getattr(parts, pick)
            err = grad_check(f, param, max_elements=6)
            assert err < 1e-4, (pick, name, err)


def test_descent_sanity_over_ten_seeds():
    decreased = 0
    for seed in range(10):
        model = _tiny_model(seed)
        batch = _tiny_batch(seed)
        opt = AdamW(model.online_parameters(), lr=1e-3, weight_decay=0.0)
        before = model.losses(batch, np.random.default_rng(seed))[0].total
        before.backward()
        opt.step()
        after = model.losses(batch, np.random.default_rng(seed))[0].total
        decreased += float(after.data) < float(before.data)
    assert decreased >= 9


def test_train_step_logs_consistent_breakdown():
    model = _tiny_model()
    opt = AdamW(model.online_parameters(), lr=1e-3)
    row = model.train_step(_tiny_batch(), opt, np.random.default_rng(0))
    assert set(row) == {"l_itc", "l_itm", "l_lm", "total", "tau"}
    assert abs(row["total"] - row["l_itc"] - row["l_itm"] - row["l_lm"]) < 1e-9
    assert len(model.contrast.image_queue) == 3
    assert TAU_RANGE[0] <= row["tau"] <= TAU_RANGE[1]
