import numpy as np
import pytest

from awmlab import tensor as T
from awmlab.defenses.anp import ANPConfig, anp_defend, anp_perturb, prune_model, select_threshold
from awmlab.defenses.finetune import finetune_defend
from awmlab.harness import ExperimentConfig, ONE_SHOT, defense_subset, prepare, run_defense
from awmlab.metrics import evaluate, removal_success
from awmlab.models import build_model, neuron_tensors, vgg_mini_spec


def _perturbed_loss(model, pert, x, y):
    sites, _ = neuron_tensors(model, pert)
    return T.cross_entropy(model.forward(x, neuron=sites), y).item()


def test_config_defaults_and_validation():
    c = ANPConfig()
    assert c.epsilon == 0.4 and c.prune_thresholds[0] == 0.0 and c.prune_thresholds[-1] == 0.95
    with pytest.raises(ValueError):
        ANPConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        ANPConfig(prune_thresholds=[0.5, 1.2])


def test_zero_steps_is_zero_perturbation(tiny_model):
    model, data = tiny_model
    pert = anp_perturb(model, data, 0.4, steps=0)
    assert np.all(pert.delta == 0) and np.all(pert.xi == 0)


def test_perturbation_is_neuronwise_and_bounded(tiny_model):
    model, data = tiny_model
    pert = anp_perturb(model, data, 0.25, steps=5)
    assert pert.neuron_count == sum(s.n for s in model.neuron_sites)
    assert np.abs(pert.delta).max() <= 0.25 and np.abs(pert.xi).max() <= 0.25
    pert.check()


def test_perturbation_raises_loss_on_its_batch(tiny_model):
    model, data = tiny_model
    model.params["0.bias"].data[:] = 0.05  # give xi something to act on
    pert = anp_perturb(model, data, 0.4, steps=5, batch_size=len(data))
    zero = anp_perturb(model, data, 0.4, steps=0)
    assert _perturbed_loss(model, pert, data.images, data.labels) >= \
        _perturbed_loss(model, zero, data.images, data.labels)


def test_epsilon_must_be_positive(tiny_model):
    model, data = tiny_model
    with pytest.raises(ValueError):
        anp_perturb(model, data, 0.0)


def test_threshold_zero_prunes_nothing(tiny_model):
    model, _ = tiny_model
    n = model.neuron_sites[-1].stop
    pruned = prune_model(model, np.random.default_rng(0).uniform(0, 1, n), 0.0)
    assert pruned.params.checksum() == model.params.checksum()


def test_threshold_above_one_prunes_every_neuron():
    model, _ = build_model(vgg_mini_spec((1, 8, 8), 4), seed=1)
    n = model.neuron_sites[-1].stop
    pruned = prune_model(model, np.ones(n), 1.0 + 0.4)
    for s in model.neuron_sites:
        assert np.all(pruned.params[f"{s.site}.gamma"].data == 0.0)
        # the conv weights themselves stay; the BN scale is the switch
        assert np.any(pruned.params[f"{s.host}.weight"].data != 0.0)
    # the classifier is never a pruning site
    assert np.array_equal(pruned.params["25.weight"].data, model.params["25.weight"].data)


def test_pruning_without_batchnorm_zeroes_weight_rows(tiny_model):
    model, _ = tiny_model
    n = model.neuron_sites[-1].stop
    mask = np.ones(n)
    mask[[0, 9]] = 0.0   # first neuron of each conv layer
    pruned = prune_model(model, mask, 0.5)
    assert np.all(pruned.params["0.weight"].data[0] == 0)
    assert np.all(pruned.params["3.weight"].data[1] == 0)
    assert np.any(pruned.params["0.weight"].data[1] != 0)
    assert model.params["0.weight"].data[0].any()   # the original is untouched


def test_defend_produces_one_model_per_threshold(tiny_model):
    model, data = tiny_model
    res = anp_defend(model, data, ANPConfig(epochs=5, prune_thresholds=[0.0, 0.5, 1.0]))
    assert len(res.pruned) == 3 and len(res.losses) == 5
    assert 0.0 <= res.neuron_mask.min() and res.neuron_mask.max() <= 1.0
    assert res.pruned_counts()[0] == 0
    assert res.pruned_counts() == sorted(res.pruned_counts())


def test_defend_rejects_empty_data(tiny_model):
    model, data = tiny_model
    with pytest.raises(ValueError):
        anp_defend(model, data.subset([]), ANPConfig(epochs=1))


def test_select_threshold_rules():
    rows = [(0.0, 0.95, 0.9), (0.2, 0.90, 0.3), (0.4, 0.85, 0.1), (0.6, 0.50, 0.0)]
    assert select_threshold(rows, poisoned_acc=0.95)[0] == 0.4
    assert select_threshold(rows, poisoned_acc=0.95, max_drop=0.07)[0] == 0.2
    assert select_threshold([(0.5, 0.2, 0.0), (0.7, 0.3, 0.5)], poisoned_acc=0.95)[0] == 0.7
    with pytest.raises(ValueError):
        select_threshold([], 0.9)


# ---------------------------------------------------------------- finetune

def test_finetune_zero_epochs_is_a_copy(tiny_model):
    model, data = tiny_model
    tuned = finetune_defend(model, data, epochs=0)
    assert tuned is not model and tuned.params.checksum() == model.params.checksum()


def test_finetune_zero_lr_changes_nothing(tiny_model):
    model, data = tiny_model
    tuned = finetune_defend(model, data, epochs=2, lr=0.0)
    assert tuned.params.checksum() == model.params.checksum()


def test_finetune_updates_a_copy_only(tiny_model):
    model, data = tiny_model
    before = model.params.checksum()
    tuned = finetune_defend(model, data, epochs=1, lr=0.05)
    assert model.params.checksum() == before != tuned.params.checksum()


@pytest.mark.slow
def test_finetune_removes_less_than_awm_on_ten_images(toy_prep):
    poisoned = toy_prep.baseline.asr_all
    awm = run_defense(toy_prep, "awm", ONE_SHOT, 0)["report"].asr_all
    data = defense_subset(toy_prep.pool, 10, 0)
    tuned = finetune_defend(toy_prep.model, data, epochs=20, lr=0.01, seed=0)
    ft = evaluate(tuned, toy_prep.eval, toy_prep.attacks).asr_all
    assert poisoned - ft < poisoned - awm


@pytest.mark.slow
def test_anp_with_500_clean_samples_finds_a_removing_threshold():
    # desk-scale analogue of ANP's large-budget success; see the decisions ledger
    prep = prepare(ExperimentConfig(pool_per_class=50))
    r = run_defense(prep, "anp", 500, 0)
    best = min(asr for _, _, asr in r["sweep"])
    assert removal_success(best, prep.config.dataset["classes"])
