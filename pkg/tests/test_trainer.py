import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from hypalign.adversary import PerturbationSpec
from hypalign.dataio import RunConfig, generate_synthetic, stack, write_metrics_csv
from hypalign.hierarchy import parse_forest
from hypalign.model import EmbeddingModel
from hypalign.trainer import (
    EvalReport,
    TrainingDiverged,
    batch_seed,
    clean_accuracy,
    evaluate,
    level_labels,
    norm_ordering_rate,
    train,
    transfer_attack_eval,
)

from conftest import MINIMAL_TREE, reference_data, reference_forest

TINY = dict(feature_dim=8, embed_dim=4, batch_size=16, samples_per_leaf=8)


def tiny_data(forest, n=8, d=8, seed=0, split=0):
    return stack(generate_synthetic(forest, n, d, 0.5, 0.1, seed=seed, split=split), forest)


def test_batch_seed():
    assert batch_seed(0, 1, 2) == batch_seed(0, 1, 2)
    seeds = {batch_seed(0, e, b) for e in range(10) for b in range(10)}
    assert len(seeds) == 100
    assert all(0 <= s < 2**63 for s in seeds)


def test_zero_epochs_leaves_parameters(small_forest):
    cfg = RunConfig(**TINY)
    x, y = tiny_data(small_forest)
    init = EmbeddingModel.from_config(small_forest, cfg).snapshot()
    state = train(cfg, small_forest, x, y, epochs=0)
    for k, v in state.model.snapshot().items():
        assert torch.equal(v, init[k])
    assert state.metrics == [] and state.epoch == 0


def test_rejects_empty_training_set(small_forest):
    with pytest.raises(ValueError):
        train(RunConfig(**TINY), small_forest, np.zeros((0, 8)), np.zeros(0, dtype=int))


def test_clean_training_loss_decreases():
    forest = reference_forest()
    cfg = RunConfig(lambda1=0.0, lambda2=0.0, eps_x=0.0, eps_t=0.0, pgd_steps_train=0, epochs=20, samples_per_leaf=16)
    x, y = tiny_data(forest, 16, cfg.feature_dim)
    state = train(cfg, forest, x, y)
    losses = [row["loss_total"] for row in state.metrics if row["level"] == "all"]
    assert len(losses) == 20
    assert losses[-1] < 0.5 * losses[0]
    assert losses[-1] < losses[9] < losses[0]


def test_divergence_keeps_state(small_forest):
    cfg = RunConfig(**TINY)
    x, y = tiny_data(small_forest)
    x[3, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, small_forest, x, y)
    assert info.value.state.epoch == 0
    assert all(torch.isfinite(v).all() for v in info.value.state.model.snapshot().values())


@pytest.mark.parametrize("strategy", ["leaf-only", "universal", "per-level"])
def test_every_strategy_trains(small_forest, strategy):
    cfg = RunConfig(strategy=strategy, epochs=2, aux_on_clean=strategy == "per-level", **TINY)
    x, y = tiny_data(small_forest)
    state = train(cfg, small_forest, x, y)
    assert state.epoch == 2
    # one loss row and L + 1 accuracy rows per epoch
    assert len(state.metrics) == 2 * (1 + small_forest[0].depth + 1)


def test_training_resumes_from_state(small_forest):
    cfg = RunConfig(epochs=2, **TINY)
    x, y = tiny_data(small_forest)
    whole = train(cfg, small_forest, x, y)
    half = train(cfg, small_forest, x, y, epochs=1)
    half = train(cfg, small_forest, x, y, state=half, epochs=1)
    for k, v in whole.model.snapshot().items():
        assert torch.equal(v, half.model.snapshot()[k])


def test_metrics_are_deterministic(tmp_path, small_forest):
    cfg = RunConfig(epochs=2, **TINY)
    x, y = tiny_data(small_forest)
    paths = []
    for i in range(2):
        state = train(cfg, small_forest, x, y)
        paths.append(tmp_path / f"m{i}.csv")
        write_metrics_csv(state.metrics, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


# -- evaluation ---------------------------------------------------------------------------------


def test_level_labels(small_forest):
    tree = small_forest[0]
    y = torch.tensor([tree.index_of(0, "a2"), tree.index_of(0, "b3")])
    assert [tree.name_of(1, int(c)) for c in level_labels(small_forest, y, 1)] == ["A", "B"]
    assert level_labels(small_forest, y, 2).tolist() == [0, 0]


def test_untrained_two_class_accuracy_is_chance():
    forest = parse_forest(MINIMAL_TREE)
    x, y = tiny_data(forest, 500, 8)
    accs = [clean_accuracy(EmbeddingModel(forest, 8, 4, seed=s), x, y)[0] for s in range(40)]
    assert abs(np.mean(accs) - 0.5) < 0.1
    # the root level is always right
    assert clean_accuracy(EmbeddingModel(forest, 8, 4), x, y)[1] == 1.0


def test_zero_budget_attack_is_clean(small_forest):
    x, y = tiny_data(small_forest, 10)
    model = EmbeddingModel(small_forest, 8, 4, seed=3)
    spec = PerturbationSpec(eps_x=0.0, alpha_x=0.01, steps=5)
    rep = evaluate(model, x, y, spec, transfer=True)
    assert rep.robust_acc == rep.clean_acc
    clean_error = 1 - np.array(rep.clean_acc)
    assert_allclose(rep.transfer, np.tile(clean_error, (3, 1)), rtol=0, atol=0)


def test_transfer_rates_in_range(small_forest):
    x, y = tiny_data(small_forest, 10)
    model = EmbeddingModel(small_forest, 8, 4, seed=3)
    out = transfer_attack_eval(model, x, y, PerturbationSpec(eps_x=0.5, alpha_x=0.1, steps=5))
    assert out.shape == (3, 3)
    assert ((out >= 0) & (out <= 1)).all()


def test_report_rows_and_transfer_summary():
    rep = EvalReport([0.5, 0.75], [0.25, 0.5], np.array([[0.6, 0.1], [0.3, 0.4]]), 1.0, 0.9, 0.8)
    assert rep.rows(3) == [
        {"epoch": 3, "split": "test", "level": 0, "clean_acc": 0.5, "robust_acc": 0.25},
        {"epoch": 3, "split": "test", "level": 1, "clean_acc": 0.75, "robust_acc": 0.5},
    ]
    assert rep.superclass_to_leaf_transfer() == 0.3
    with pytest.raises(ValueError):
        EvalReport([1.0], [1.0], None, 1.0, 0.0, 0.0).superclass_to_leaf_transfer()


def test_norm_ordering_rate(small_forest):
    model = EmbeddingModel(small_forest, 3, 3)
    rate = norm_ordering_rate(model)
    assert 0 <= rate <= 1
    with torch.no_grad():
        # mid-level texts near the origin, the root a little further out
        model.text_base[0][5:7].mul_(1e-6)
        model.text_base[0][7].mul_(1e-3)
        model.context.zero_()
    assert norm_ordering_rate(model) == 5 / 7


# -- trained reference model ---------------------------------------------------------------------


@pytest.mark.slow
def test_superclass_accuracy_at_least_leaf(trained_reference):
    acc = trained_reference.report.clean_acc
    assert acc[1] >= acc[0] and acc[2] >= acc[1]
    assert acc[0] > 0.5


@pytest.mark.slow
def test_direct_attack_dominates_each_eval_level(trained_reference):
    t = trained_reference.report.transfer
    for e in range(t.shape[1]):
        assert t[e, e] >= t[:, e].max()


@pytest.mark.slow
def test_reference_norms(trained_reference):
    rep = trained_reference.report
    assert rep.norm_ordering >= 0.95
    assert rep.mean_image_norm > rep.mean_leaf_text_norm


@pytest.mark.slow
def test_robust_accuracy_below_clean(trained_reference):
    rep = trained_reference.report
    assert all(r <= c for r, c in zip(rep.robust_acc, rep.clean_acc))
    x, y = reference_data(1)
    assert clean_accuracy(trained_reference.model, x, y) == rep.clean_acc
