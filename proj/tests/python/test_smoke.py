import json
from pathlib import Path

import numpy as np
import pytest

import malvit

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures" / "celeba"


@pytest.fixture(scope="module")
def data():
    return malvit.synth(n_attributes=3, n_train=8, n_val=4, n_test=4, seed=1)


def test_synth_shapes_and_determinism(data):
    train = data["train"]
    assert train["images"].shape == (8, 64, 64, 3)
    assert train["images"].dtype == np.float32
    assert train["labels"].shape == (8, 3)
    assert train["task_names"] == ["5_o_Clock_Shadow", "Black_Hair", "Blond_Hair"]
    again = malvit.synth(n_attributes=3, n_train=8, n_val=4, n_test=4, seed=1)
    assert np.array_equal(train["images"], again["train"]["images"])
    assert 0.0 <= train["images"].min() and train["images"].max() <= 1.0


def test_model_logits_and_attention(data):
    model = malvit.Model(data["train"]["task_names"], variant="mal", seed=0)
    x = data["test"]["images"]
    logits = model.logits(x)
    assert logits.shape == (4, 3)
    maps = model.attention(x[:1])
    assert len(maps) == json.loads(model.config)["depth"]
    assert np.allclose(maps[0].sum(axis=-1), 1.0, atol=1e-5)


def test_attacks_respect_budget(data):
    model = malvit.Model(data["train"]["task_names"], seed=0)
    x, y = data["test"]["images"], data["test"]["labels"]
    adv = malvit.attack(model, x, y, family="pgd", eps=0.03, steps=3, random_start=True, seed=2)
    assert np.abs(adv.astype(np.float64) - x).max() <= 0.03 + 1e-9
    fgsm = malvit.attack(model, x, y, family="fgsm", eps=0.03)
    pgd1 = malvit.attack(model, x, y, family="pgd", eps=0.03, steps=1, alpha=0.03)
    assert np.array_equal(fgsm, pgd1)


def test_metrics(data):
    assert malvit.balanced_accuracy(np.array([1, 0, 1, 0]), np.array([1, 1, 0, 0])) == 0.5
    model = malvit.Model(data["train"]["task_names"], seed=0)
    clean = malvit.evaluate_clean(model, data["test"]["images"], data["test"]["labels"])
    robust = malvit.evaluate_robust(model, data["test"]["images"], data["test"]["labels"], family="fgsm", eps=0.0)
    assert clean == robust


def test_errors_are_translated():
    with pytest.raises(malvit.MalvitError):
        malvit.Model(["A"], variant="nope")


def test_cli_round_trip(tmp_path):
    code, _, err = malvit.run_cli(["--out", str(tmp_path), "synth", "--attrs", "2", "--n", "4", "--n-val", "2",
                                   "--n-test", "2", "--image-size", "16"])
    assert code == 0, err
    d = malvit.load_dataset(tmp_path / "train.mvd")
    assert d["images"].shape == (4, 16, 16, 3)
    code, _, err = malvit.run_cli(["frobnicate"])
    assert code == 2


def test_celeba_table():
    names, files, values = malvit.read_attribute_table(FIXTURES / "list_attr_celeba.txt")
    assert len(files) == 5
    assert names[0] == "5_o_Clock_Shadow"
    assert values[0][:3] == [-1, 1, 1]
