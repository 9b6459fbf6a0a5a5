import numpy as np
import pytest
import torch

from icm.errors import DegeneratePrediction
from icm.services import training as training_service
from icm.services.network import NetworkConfig, build_network
from icm.services.tokenizer import FieldRecord, MaterialRecord, SamplingBounds, TokenDataset, full_context, tokenize_field
from icm.services.training import (
    ScheduleConfig,
    TrainConfig,
    WarmupCosineScheduler,
    build_optimizer,
    checkpoint_interval,
    context_loss,
    equilibrium_loss,
    learning_rate,
    newton_schulz_orthogonalize,
    provider_loss,
    train,
)

SMALL = NetworkConfig(embed_dim=8, head_count=2, subtoken_blocks=1, main_blocks=1, ffn_hidden=16, seed=1)


@pytest.fixture(scope="module")
def context(solved_fields):
    return full_context([tokenize_field(mesh, field, k) for k, (mesh, field) in enumerate(solved_fields)])


@pytest.fixture(scope="module")
def dataset(solved_fields):
    fields = [
        FieldRecord("geometry-01", field.mode, field.step, tokenize_field(mesh, field, k), field_id=k)
        for k, (mesh, field) in enumerate(solved_fields)
    ]
    return TokenDataset(materials=[MaterialRecord("m0", fields), MaterialRecord("m1", list(reversed(fields)))])


def test_true_gradients_have_vanishing_loss(context, polynomial_material):
    loss = provider_loss(context, polynomial_material.gradient(context.tokens.invariants))
    assert loss.value < 1e-12
    assert loss.denominator > 0.0


@pytest.mark.parametrize("factor", [1e-3, 1.0, 1e3])
def test_loss_is_scale_invariant(context, factor):
    g = np.random.default_rng(0).standard_normal((context.tokens.subtoken_count, 2))
    reference = provider_loss(context, g).value
    assert provider_loss(context, factor * g).value == pytest.approx(reference, rel=1e-12)


def test_zero_prediction_is_degenerate(context):
    with pytest.raises(DegeneratePrediction):
        provider_loss(context, np.zeros((context.tokens.subtoken_count, 2)))


def test_equilibrium_loss_by_hand():
    A = torch.tensor([[[1.0, 0.0], [0.0, 1.0]], [[-1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    g = torch.tensor([[1.0, 2.0], [1.0, 2.0]], dtype=torch.float64)
    loss = equilibrium_loss(g, A, torch.tensor([0, 0]), 1)
    # element forces (1, 2) and (-1, 2) sum to (0, 4)
    assert loss.numerator == pytest.approx(16.0)
    assert loss.denominator == pytest.approx(5.0)
    assert loss.value == pytest.approx(3.2)


def test_network_loss_has_gradients(context):
    model = build_network(SMALL)
    loss = context_loss(model, context)
    loss.tensor.backward()
    assert np.isfinite(loss.value)
    assert all(p.grad is not None for p in model.parameters())


def test_newton_schulz_reaches_identity():
    X = newton_schulz_orthogonalize(torch.diag(torch.tensor([2.0, 1.0], dtype=torch.float64)), iterations=5)
    np.testing.assert_allclose(X.numpy(), np.eye(2), atol=1e-4)


def test_newton_schulz_matches_polar_factor():
    rng = np.random.default_rng(4)
    U, _ = np.linalg.qr(rng.standard_normal((4, 3)))
    V, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    M = U @ np.diag([3.0, 2.0, 1.0]) @ V.T
    X = newton_schulz_orthogonalize(torch.from_numpy(M), iterations=30).numpy()
    assert X.shape == (4, 3)
    np.testing.assert_allclose(X, U @ V.T, atol=1e-3)


def test_newton_schulz_default_iterations_on_random_matrix():
    M = np.random.default_rng(8).standard_normal((8, 4))
    R = newton_schulz_orthogonalize(torch.from_numpy(M)).numpy()
    U, _, Vt = np.linalg.svd(M, full_matrices=False)
    assert np.linalg.norm(R.T @ R - np.eye(4)) < 1e-3
    np.testing.assert_allclose(R, U @ Vt, atol=1e-3)


def test_newton_schulz_keeps_orthogonal_input():
    Q, _ = np.linalg.qr(np.random.default_rng(9).standard_normal((4, 4)))
    np.testing.assert_allclose(newton_schulz_orthogonalize(torch.from_numpy(Q)).numpy(), Q, atol=1e-6)


def test_quintic_coefficients_land_in_a_band():
    M = torch.from_numpy(np.random.default_rng(5).standard_normal((6, 4)))
    X = newton_schulz_orthogonalize(M, iterations=5, coefficients="quintic")
    singular = torch.linalg.svdvals(X).numpy()
    assert np.all((singular > 0.5) & (singular < 1.5))


def test_newton_schulz_of_zero_is_zero():
    assert torch.all(newton_schulz_orthogonalize(torch.zeros((3, 2), dtype=torch.float64)) == 0.0)


def test_warmup_cosine_schedule():
    schedule = ScheduleConfig(total_steps=1000)
    assert learning_rate(schedule, 0) == 0.0
    assert learning_rate(schedule, 50) == pytest.approx(2.5e-4)
    assert learning_rate(schedule, 100) == pytest.approx(5e-4)
    assert learning_rate(schedule, 1000) == pytest.approx(5e-5)
    values = [learning_rate(schedule, s) for s in range(100, 1001, 50)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_scheduler_drives_optimizer():
    model = build_network(SMALL)
    optimizer = build_optimizer(model, "adamw", lr=5e-4)
    scheduler = WarmupCosineScheduler(optimizer, ScheduleConfig(total_steps=10))
    assert optimizer.param_groups[0]["lr"] == 0.0
    optimizer.step()
    scheduler.step()
    assert optimizer.param_groups[0]["lr"] == pytest.approx(5e-4)


def test_optimizer_groups():
    model = build_network(SMALL)
    muon = build_optimizer(model, "muon")
    assert [g["muon"] for g in muon.param_groups] == [True, False]
    assert all(p.ndim == 2 for p in muon.param_groups[0]["params"])
    assert len(build_optimizer(model, "adamw").param_groups) == 1
    with pytest.raises(ValueError):
        build_optimizer(model, "sgd")


def test_muon_step_moves_matrices(context):
    model = build_network(SMALL)
    optimizer = build_optimizer(model, "muon", lr=1e-3, weight_decay=0.0)
    before = model.output_proj.weight.detach().clone()
    context_loss(model, context).tensor.backward()
    optimizer.step()
    change = model.output_proj.weight.detach() - before
    # the update is an approximately orthogonal direction scaled by 0.2 sqrt(max(shape))
    assert torch.linalg.matrix_norm(change) > 0.0
    assert torch.all(torch.isfinite(change))


def test_checkpoint_interval():
    assert checkpoint_interval(1000) == 50
    assert checkpoint_interval(5) == 1


def test_short_training_run(dataset):
    config = TrainConfig(
        network=SMALL,
        steps=3,
        seed=2,
        sampling=SamplingBounds(geometries=(1, 1), modes=(1, 1), steps=(1, 2), fields=(1, 2), tokens=(5, 10)),
    )
    saved = []
    result = train(dataset, config, checkpoint_fn=lambda step, model: saved.append(step))
    assert list(result.curve.columns) == ["step", "lr", "loss", "numerator", "denominator"]
    assert len(result.curve) == 3
    assert result.curve["lr"].iloc[0] == 0.0
    assert np.all(np.isfinite(result.curve["loss"]))
    assert saved == [1, 2, 3]


def test_training_is_deterministic(dataset):
    config = TrainConfig(network=SMALL, steps=2, seed=5, optimizer="adamw", sampling=SamplingBounds(tokens=(5, 10)))
    first, second = train(dataset, config), train(dataset, config)
    np.testing.assert_array_equal(first.curve["loss"].to_numpy(), second.curve["loss"].to_numpy())


def test_skipped_steps_leave_no_curve_rows(dataset, monkeypatch):
    calls = []
    real_loss = training_service.context_loss

    def failing_second_call(model, context):
        calls.append(len(calls))
        if len(calls) == 2:
            raise DegeneratePrediction("Loss denominator 0.000e+00 vanishes.")
        return real_loss(model, context)

    monkeypatch.setattr(training_service, "context_loss", failing_second_call)
    config = TrainConfig(network=SMALL, steps=3, seed=2, optimizer="adamw", sampling=SamplingBounds(tokens=(5, 10)))
    curve = train(dataset, config).curve
    assert list(curve["step"]) == [0, 2]
    assert np.all(np.isfinite(curve["loss"]))
    assert (curve["loss"] >= 0.0).all()


def test_empty_dataset_is_rejected():
    with pytest.raises(ValueError):
        train(TokenDataset(materials=[]), TrainConfig(network=SMALL, steps=1))


@pytest.mark.slow
def test_training_lowers_the_loss(dataset):
    config = TrainConfig(
        network=SMALL,
        steps=300,
        peak_lr=3e-3,
        seed=0,
        sampling=SamplingBounds(tokens=(40, 80)),
    )
    losses = train(dataset, config).curve["loss"].to_numpy()
    assert np.mean(losses[-30:]) < np.mean(losses[:30])
