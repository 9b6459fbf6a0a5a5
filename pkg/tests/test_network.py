import numpy as np
import pytest
import torch

from icm.errors import ShapeMismatch
from icm.services.network import (
    NetworkConfig,
    backward,
    build_network,
    context_tensors,
    embed_contexts,
    field_embeddings,
    predict,
)
from icm.services.tokenizer import TokenSet, full_context, normalize_invariants, tokenize_field

SMALL = NetworkConfig(embed_dim=8, head_count=2, subtoken_blocks=1, main_blocks=1, ffn_hidden=16, seed=3)


@pytest.fixture(scope="module")
def model():
    return build_network(SMALL)


@pytest.fixture(scope="module")
def tokens(solved_fields):
    mesh, field = solved_fields[1]
    return tokenize_field(mesh, field).select(np.arange(15))


def _reverse_subtokens(tokens: TokenSet) -> TokenSet:
    index = np.concatenate([np.arange(tokens.offsets[t + 1] - 1, tokens.offsets[t] - 1, -1) for t in range(len(tokens))])
    return TokenSet(
        node_ids=tokens.node_ids,
        offsets=tokens.offsets,
        A=tokens.A[index],
        A_bar=tokens.A_bar[index],
        invariants=tokens.invariants[index],
        element_ids=tokens.element_ids[index],
        field_ids=tokens.field_ids,
    )


def test_padding_layout(tokens):
    subtokens, mask = context_tensors(normalize_invariants(tokens))
    assert subtokens.shape == (15, int(tokens.counts.max()), 6)
    np.testing.assert_array_equal(mask.sum(dim=1).numpy(), tokens.counts)
    assert torch.all(subtokens[~mask] == 0.0)


def test_order_invariance(model, tokens):
    context = normalize_invariants(tokens)
    queries = context.I_hat[:7]
    reference = predict(model, context, queries)

    permuted = normalize_invariants(_reverse_subtokens(tokens.select(np.random.default_rng(0).permutation(len(tokens)))))
    order = np.random.default_rng(1).permutation(len(queries))
    shuffled = predict(model, permuted, queries[order])
    np.testing.assert_allclose(shuffled, reference[order], atol=1e-10)


def test_duplicated_context_is_invariant(model, tokens):
    context = normalize_invariants(tokens)
    doubled = normalize_invariants(TokenSet.concatenate([tokens, tokens]))
    queries = context.I_hat[:5]
    np.testing.assert_allclose(predict(model, doubled, queries), predict(model, context, queries), atol=1e-10)


def test_queries_are_independent(model, tokens):
    context = normalize_invariants(tokens)
    queries = context.I_hat[:6]
    batch = predict(model, context, queries)
    single = predict(model, context, queries[3:4])
    chunked = predict(model, context, queries, chunk=2)
    np.testing.assert_allclose(single[0], batch[3], atol=1e-12)
    np.testing.assert_allclose(chunked, batch, atol=1e-12)


def test_backward_matches_finite_differences(model, tokens):
    context = normalize_invariants(tokens)
    queries = context.I_hat[:4]
    cotangent = np.random.default_rng(2).standard_normal((4, 2))
    grads = backward(model, context, queries, cotangent)
    params = dict(model.named_parameters())
    eps = 1e-6
    for name in ("subtoken_proj.weight", "main_blocks.0.attention.k_proj.weight", "output_proj.bias"):
        p = params[name]
        flat = p.data.view(-1)
        original = flat[0].item()
        values = []
        for shift in (eps, -eps):
            flat[0] = original + shift
            values.append(float(np.sum(cotangent * predict(model, context, queries))))
        flat[0] = original
        fd = (values[0] - values[1]) / (2.0 * eps)
        analytic = grads[name].reshape(-1)[0]
        assert analytic == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_head_mask_changes_output(model, tokens):
    context = normalize_invariants(tokens)
    queries = context.I_hat[:3]
    full = predict(model, context, queries, head_mask=torch.ones(2, dtype=torch.float64))
    np.testing.assert_allclose(full, predict(model, context, queries), atol=1e-14)
    silenced = predict(model, context, queries, head_mask=torch.tensor([1.0, 0.0], dtype=torch.float64))
    assert np.max(np.abs(silenced - full)) > 0.0


def test_shape_checks(model, tokens):
    subtokens, mask = context_tensors(normalize_invariants(tokens))
    with pytest.raises(ShapeMismatch):
        model(subtokens, mask, torch.zeros((3, 3), dtype=torch.float64))
    with pytest.raises(ShapeMismatch):
        model(subtokens[..., :5], mask, torch.zeros((3, 2), dtype=torch.float64))


def test_heads_must_divide_embedding():
    with pytest.raises(ValueError):
        NetworkConfig(embed_dim=10, head_count=4)


def test_same_seed_same_weights():
    a, b = build_network(SMALL), build_network(SMALL)
    for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), name


def test_field_embeddings(model, solved_fields):
    sets = [tokenize_field(mesh, field, k).select(np.arange(10)) for k, (mesh, field) in enumerate(solved_fields)]
    batch = embed_contexts(model, normalize_invariants(TokenSet.concatenate(sets)))
    assert batch.context_embeddings.shape == (20, SMALL.embed_dim)
    assert sorted(batch.field_embeddings) == [0, 1]


def test_each_field_is_embedded_as_its_own_context(model, solved_fields):
    sets = [tokenize_field(mesh, field, k).select(np.arange(12)) for k, (mesh, field) in enumerate(solved_fields)]
    together = field_embeddings(model, sets)
    alone = field_embeddings(model, sets[:1])
    assert sorted(together) == [0, 1]
    np.testing.assert_array_equal(together[0], alone[0])
    np.testing.assert_array_equal(together[0], embed_contexts(model, full_context(sets[:1])).field_embeddings[0])
    assert together[0].shape == (SMALL.embed_dim,)
    with pytest.raises(ValueError):
        field_embeddings(model, [sets[0], sets[0]])
