import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgreport.corpus import build_vocabulary
from kgreport.corpus.tokenizer import CLS_ID, EMPTY_ID
from kgreport.encoders import (
    ModelConfig,
    VisionEncoder,
    build_knowledge_encoder,
    build_text_encoder,
    encode_image,
    encode_knowledge,
    encode_text,
    fuse_cross_attention,
    momentum_update,
    patchify,
    self_attention,
    CrossAttentionFusion,
    EnhancedVisualFeatures,
)
from kgreport.exceptions import ConfigError, ContractError
from kgreport.generator import KnowledgeReportModel
from kgreport.nn import AttentionBlock, Linear, Module
from kgreport.tensor import Tensor, grad_check, layer_norm, sum_

from oracles import loop_attention, loop_layer_norm

VOCAB = build_vocabulary()


def small_cfg(**kw):
    base = dict(width=16, layers=1, heads=2, proj_dim=8, patch=8, image_side=16, max_len=16,
                vocab_size=len(VOCAB), queue_size=8, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def _lists(block: AttentionBlock):
    out = []
    for lin in (block.q, block.k, block.v, block.o):
        out += [lin.weight.data.tolist(), lin.bias.data.tolist()]
    return out


# -- self-attention ---------------------------------------------------------
@pytest.mark.parametrize("L", [1, 3, 5, 8])
def test_self_attention_matches_loop_oracle(L):
    rng = np.random.default_rng(L)
    block = AttentionBlock(12, 3, rng)
    x = rng.normal(size=(L, 12))
    ref, _ = loop_attention(x.tolist(), x.tolist(), *_lists(block), n_heads=3)
    np.testing.assert_allclose(self_attention(Tensor(x), block).data, ref, atol=1e-10, rtol=0)


def test_masked_self_attention_matches_loop_oracle():
    rng = np.random.default_rng(0)
    block = AttentionBlock(8, 2, rng)
    x = rng.normal(size=(6, 8))
    allowed = np.tril(np.ones((6, 6), dtype=bool))
    ref, _ = loop_attention(x.tolist(), x.tolist(), *_lists(block), n_heads=2,
                            allowed=allowed.tolist())
    np.testing.assert_allclose(self_attention(Tensor(x), block, allowed).data, ref, atol=1e-10)


def test_single_token_attends_to_itself():
    rng = np.random.default_rng(1)
    block = AttentionBlock(8, 2, rng)
    x = Tensor(rng.normal(size=(1, 8)))
    expected = block.o(block.v(x)).data  # softmax over one key is 1
    np.testing.assert_allclose(self_attention(x, block).data, expected, atol=1e-12)


def test_identical_keys_give_mean_of_values():
    rng = np.random.default_rng(2)
    block = AttentionBlock(8, 2, rng)
    q = Tensor(rng.normal(size=(1, 3, 8)))
    kv = Tensor(np.tile(rng.normal(size=(1, 1, 8)), (1, 4, 1)))
    ctx = block.attend(q, kv).data
    np.testing.assert_allclose(ctx[0], np.tile(block.v(kv).data[0].mean(axis=0), (3, 1)), atol=1e-12)


def test_width_not_divisible_by_heads_is_config_error():
    with pytest.raises(ConfigError):
        AttentionBlock(10, 3, np.random.default_rng(0))


@settings(max_examples=20)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_attention_rows_are_distributions_under_masks(L, seed):
    rng = np.random.default_rng(seed)
    block = AttentionBlock(8, 2, rng)
    x = Tensor(rng.normal(size=(1, L, 8)))
    mask = rng.random((L, L)) < 0.5
    mask[np.arange(L), np.arange(L)] = True  # every query sees at least itself
    bias = np.where(mask, 0.0, -np.inf)[None, None]
    _, w = block.attend(x, x, bias, return_weights=True)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(w.data[0, :, ~mask] == 0.0)


def test_attention_block_gradient():
    rng = np.random.default_rng(3)
    block = AttentionBlock(8, 2, rng)
    x = Tensor(rng.normal(size=(1, 4, 8)))
    assert grad_check(lambda v: sum_(block(v) * block(v)), x) < 1e-4
    assert grad_check(lambda w: sum_(self_attention(x, block) * x), block.q.weight) < 1e-4


# -- image encoder ----------------------------------------------------------
def test_image_encoder_rows():
    cfg = small_cfg(width=16, image_side=32, patch=8)
    rng = np.random.default_rng(0)
    vis = VisionEncoder(cfg, rng)
    feats = encode_image(rng.random((2, 32, 32, 1)), vis, Linear(16, 8, rng))
    assert feats.f_I.shape == (2, 17, 16)
    np.testing.assert_allclose(np.linalg.norm(feats.cls_projection.data, axis=-1), 1.0, atol=1e-6)


def test_one_patch_change_keeps_shape():
    cfg = small_cfg()
    vis = VisionEncoder(cfg, np.random.default_rng(0))
    img = np.random.default_rng(1).random((1, 16, 16, 1))
    other = img.copy()
    other[0, :8, :8] = 0.0
    a, b = vis(img).data, vis(other).data
    assert a.shape == b.shape and not np.allclose(a, b)


def test_indivisible_patching_is_config_error():
    with pytest.raises(ConfigError):
        small_cfg(image_side=20, patch=8)
    with pytest.raises(ConfigError):
        patchify(np.zeros((1, 10, 10, 1)), 4)


def test_patch_order_matters():
    cfg = small_cfg()
    vis = VisionEncoder(cfg, np.random.default_rng(0))
    img = np.random.default_rng(2).random((1, 16, 16, 1))
    swapped = img.copy()
    swapped[0, :8, :8], swapped[0, 8:, 8:] = img[0, 8:, 8:], img[0, :8, :8]
    # permuting patches changes the [CLS] row because positions are learned per slot
    assert not np.allclose(vis(img).data[0, 0], vis(swapped).data[0, 0])


def test_patchify_row_major():
    img = np.arange(16.0).reshape(1, 4, 4, 1)
    p = patchify(img, 2)
    np.testing.assert_array_equal(p[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])


# -- text encoder -----------------------------------------------------------
def test_text_shape_and_bidirectionality():
    cfg = small_cfg()
    text = build_text_encoder(cfg, np.random.default_rng(0))
    ids = np.array([[CLS_ID] + VOCAB.tokenize("there is a pleural effusion")])
    h = encode_text(ids, text).h_T.data
    assert h.shape == (1, ids.shape[1], 16)
    ids2 = ids.copy()
    ids2[0, -1] = VOCAB.stoi["heart"]
    assert not np.allclose(encode_text(ids2, text).h_T.data[0, 0], h[0, 0])


def test_text_with_image_cross_is_live():
    cfg = small_cfg()
    rng = np.random.default_rng(0)
    text = build_text_encoder(cfg, rng)
    ids = np.array([[CLS_ID] + VOCAB.tokenize("the heart is normal")])
    vis = EnhancedVisualFeatures(Tensor(rng.normal(size=(1, 5, 16))))
    zero = EnhancedVisualFeatures(Tensor(np.zeros((1, 5, 16))))
    a = encode_text(ids, text, image=vis).h_T.data
    b = encode_text(ids, text, image=zero).h_T.data
    assert not np.allclose(a, b)


def test_overlong_text_is_contract_error():
    text = build_text_encoder(small_cfg(max_len=4), np.random.default_rng(0))
    with pytest.raises(ContractError):
        encode_text(np.ones((1, 5), dtype=int), text)


# -- sharing ----------------------------------------------------------------
def _ids(module: Module) -> dict:
    return {name: id(p) for name, p in module.named_parameters().items()}


def test_knowledge_shares_exactly_non_attention_with_text():
    cfg = small_cfg(layers=2)
    text = build_text_encoder(cfg, np.random.default_rng(0))
    know = build_knowledge_encoder(text, cfg, np.random.default_rng(1))
    t_ids, k_ids = _ids(text), _ids(know)
    shared = {n for n, i in k_ids.items() if i in set(t_ids.values())}
    attention = {n for n in k_ids if "attn" in n}
    assert shared == set(k_ids) - attention
    assert attention and not attention & shared
    # the shared names are embeddings, positions, feed-forward and layer norms only
    for n in shared:
        assert n.startswith(("word.", "positions.", "ln_embed.", "ln_final.")) or \
            any(part in n for part in (".ffn.", ".ln_self.", ".ln_ffn."))


def test_mutating_shared_ffn_changes_both_encoders():
    cfg = small_cfg()
    text = build_text_encoder(cfg, np.random.default_rng(0))
    know = build_knowledge_encoder(text, cfg, np.random.default_rng(1))
    ids = np.array([[CLS_ID] + VOCAB.tokenize("lung")])
    t0, k0 = text(ids).data.copy(), know(ids).data.copy()
    w = text.layers[0].ffn.up.weight
    w.data += np.random.default_rng(9).normal(size=w.shape)  # not constant: inputs are layer-normed
    assert not np.allclose(text(ids).data, t0)
    assert not np.allclose(know(ids).data, k0)


def test_mutating_knowledge_attention_leaves_text_unchanged():
    cfg = small_cfg()
    text = build_text_encoder(cfg, np.random.default_rng(0))
    know = build_knowledge_encoder(text, cfg, np.random.default_rng(1))
    ids = np.array([[CLS_ID] + VOCAB.tokenize("lung")])
    t0, k0 = text(ids).data.copy(), know(ids).data.copy()
    w = know.layers[0].self_attn.q.weight
    w.data += np.random.default_rng(9).normal(size=w.shape)
    np.testing.assert_array_equal(text(ids).data, t0)
    assert not np.allclose(know(ids).data, k0)


def test_empty_knowledge_encodes_sentinel_row():
    cfg = small_cfg()
    text = build_text_encoder(cfg, np.random.default_rng(0))
    know = build_knowledge_encoder(text, cfg, np.random.default_rng(1))
    h = encode_knowledge(np.array([EMPTY_ID]), know).h_K
    assert h.shape == (1, 1, 16)


# -- fusion -----------------------------------------------------------------
def _fusion_oracle(fusion, f_I, h_K):
    ctx, _ = loop_attention(f_I.tolist(), h_K.tolist(), *_lists(fusion.attn), n_heads=2)
    res = [[a + b for a, b in zip(r, c)] for r, c in zip(f_I.tolist(), ctx)]
    g, b = fusion.ln.gain.data.tolist(), fusion.ln.bias.data.tolist()
    return [loop_layer_norm(r, g, b) for r in res]


def test_fusion_matches_loop_oracle():
    cfg = small_cfg(width=8)
    rng = np.random.default_rng(4)
    fusion = CrossAttentionFusion(cfg, rng)
    f_I, h_K = rng.normal(size=(5, 8)), rng.normal(size=(3, 8))
    out = fuse_cross_attention(Tensor(f_I[None]), Tensor(h_K[None]), fusion).features.data[0]
    np.testing.assert_allclose(out, _fusion_oracle(fusion, f_I, h_K), atol=1e-10, rtol=0)


def test_fusion_single_knowledge_token():
    cfg = small_cfg(width=8)
    rng = np.random.default_rng(5)
    fusion = CrossAttentionFusion(cfg, rng)
    f_I, h_K = Tensor(rng.normal(size=(1, 5, 8))), Tensor(rng.normal(size=(1, 1, 8)))
    enh = fusion(f_I, h_K, keep_weights=True)
    np.testing.assert_allclose(enh.weights.data, 1.0)
    expected = layer_norm(f_I + fusion.attn.o(fusion.attn.v(h_K)).data * np.ones((1, 5, 1)),
                          fusion.ln.gain, fusion.ln.bias).data
    np.testing.assert_allclose(enh.features.data, expected, atol=1e-12)
    assert enh.shape == f_I.shape


def test_fusion_duplicate_knowledge_rows_equal_single_row():
    cfg = small_cfg(width=8)
    rng = np.random.default_rng(6)
    fusion = CrossAttentionFusion(cfg, rng)
    f_I = rng.normal(size=(4, 8))
    row = rng.normal(size=(1, 8))
    one = _fusion_oracle(fusion, f_I, row)
    two = fuse_cross_attention(Tensor(f_I[None]), Tensor(np.vstack([row, row])[None]),
                               fusion).features.data[0]
    np.testing.assert_allclose(two, one, atol=1e-10)


def test_fusion_width_mismatch():
    fusion = CrossAttentionFusion(small_cfg(width=8), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        fusion(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 2, 4))))


def test_fused_pipeline_gradient():
    cfg = small_cfg(width=8)
    rng = np.random.default_rng(7)
    vis = VisionEncoder(cfg, rng)
    fusion = CrossAttentionFusion(cfg, rng)
    h_K = Tensor(rng.normal(size=(1, 3, 8)))
    img = rng.random((1, 16, 16, 1))
    readout = Tensor(rng.normal(size=(1, 5, 8)))  # sums of layer-normed rows are constant

    def f(w):
        vis.patch_embed.weight = w
        return sum_(fusion(vis(img), h_K).features * readout)

    w = vis.patch_embed.weight
    assert grad_check(f, w, max_elements=40) < 1e-4
    assert grad_check(lambda k: sum_(fusion(vis(img), k).features * readout), h_K) < 1e-4


# -- momentum ---------------------------------------------------------------
def _pair():
    cfg = small_cfg()
    model = KnowledgeReportModel(cfg, seed=0)
    return model.branch(), model.momentum


def test_momentum_zero_copies_online():
    online, mom = _pair()
    for p in online.parameters():
        p.data += 1.0
    momentum_update(online, mom, 0.0)
    for (n, o), m in zip(online.named_parameters().items(), mom.named_parameters().values()):
        np.testing.assert_array_equal(o.data, m.data, err_msg=n)


def test_momentum_fixed_point():
    online, mom = _pair()
    before = [p.data.copy() for p in mom.parameters()]
    momentum_update(online, mom, 0.995)
    for b, p in zip(before, mom.parameters()):
        np.testing.assert_allclose(p.data, b, atol=1e-15)


def test_momentum_arithmetic():
    class P(Module):
        def __init__(self, v):
            self.w = Tensor(np.array([v]), requires_grad=True)

    mom = P(0.0)
    momentum_update(P(1.0), mom, 0.995)
    assert mom.w.data[0] == pytest.approx(0.005, abs=1e-15)


def test_momentum_misaligned_is_contract_error():
    online, _ = _pair()
    with pytest.raises(ContractError):
        momentum_update(online, {"x": Tensor(np.zeros(1))}, 0.9)
    with pytest.raises(ContractError):
        momentum_update(online, online, 1.0)


def test_momentum_copy_is_separate_storage_but_keeps_aliasing():
    online, mom = _pair()
    ids_on = {id(p) for p in online.parameters()}
    assert not ids_on & {id(p) for p in mom.parameters()}
    assert mom.text.word is mom.knowledge.word
