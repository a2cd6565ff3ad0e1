import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcfa import cli
from fedcfa.config import ConfigError, ExperimentConfig
from fedcfa.experiments import ABLATION_VARIANTS, CSV_HEADER, ablation, build_data, run
from fedcfa.metrics import top1_accuracy
from fedcfa.models import SplitModel


def write_cfg(tmp_path, **kw):
    path = tmp_path / "exp.cfg"
    ExperimentConfig(**kw).save(path)
    return path


# --- config ----------------------------------------------------------------

def test_config_text_roundtrip_default():
    cfg = ExperimentConfig()
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again == cfg and again.to_text() == cfg.to_text()


@settings(max_examples=100, deadline=None)
@given(lr=st.floats(0, 10, allow_nan=False), rounds=st.integers(1, 10_000), topk=st.integers(0, 64),
       algo=st.sampled_from(["fedavg", "fedprox", "fedmix", "fedcfa"]), corr=st.floats(0, 5), flag=st.booleans())
def test_config_roundtrip_fixed_point(lr, rounds, topk, algo, corr, flag):
    cfg = ExperimentConfig(lr=lr, rounds=rounds, topk=topk, algo=algo, lambda_corr=corr, pretrain=flag)
    text = cfg.to_text()
    back = ExperimentConfig.from_text(text)
    assert back == cfg
    assert back.to_text() == text


def test_config_parse_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("[train]\nnope = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("[data]\nrounds = 3\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("[train]\nrounds = many\n")
    cfg = ExperimentConfig.from_text("# comment\n[train]\nrounds = 7  # inline\n")
    assert cfg.rounds == 7


def test_config_validation():
    with pytest.raises(ConfigError, match="fedavg, fedprox, fedmix, fedcfa"):
        ExperimentConfig(algo="sgd").validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(topk=65).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(partition="simpson", clients=6).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(hook=4).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig().replace(unknown=1)


# --- cli exit codes --------------------------------------------------------

def test_unknown_algorithm_exit_2(capsys):
    assert cli.main(["--algo", "sgd"]) == 2
    err = capsys.readouterr().err
    for name in ("fedavg", "fedprox", "fedmix", "fedcfa"):
        assert name in err


def test_bad_threads_exit_2(monkeypatch, tmp_path):
    monkeypatch.setenv("FEDCFA_THREADS", "lots")
    assert cli.main(["--preset", "iid", "--rounds", "1", "--out", str(tmp_path)]) == 2


def test_missing_dataset_exit_3(tmp_path):
    assert cli.main(["--dataset", "mnist", "--data-dir", str(tmp_path / "none"), "--out", str(tmp_path)]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_4(tmp_path):
    path = write_cfg(tmp_path, partition="iid", clients=2, rounds=5, lr=1e300, activation="linear", samples=400,
                     algo="fedavg")
    assert cli.main(["--config", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == 4


def test_pretrain_unreachable_exit_5(tmp_path, capsys):
    path = write_cfg(tmp_path, pretrain=True, pretrain_max_epochs=1, pretrain_target=0.999, samples=400)
    code = cli.main(["--config", str(path), "--pretrain-only", "--checkpoint", str(tmp_path / "m.fcfa")])
    assert code == 5
    assert "below target" in capsys.readouterr().err


def test_pretrain_zero_target_and_checkpoint_reload(tmp_path):
    path = write_cfg(tmp_path, pretrain=True, pretrain_target=0.0, samples=400)
    ck = tmp_path / "m.fcfa"
    assert cli.main(["--config", str(path), "--pretrain-only", "--checkpoint", str(ck)]) == 0
    cfg = ExperimentConfig.load(path)
    data = build_data(cfg)
    model = SplitModel.load(ck)
    # zero target returns before any epoch: the checkpoint is the initial model
    from fedcfa.experiments import make_model
    assert model.flatten_params().tobytes() == make_model(cfg, data.test.in_dim, 2).flatten_params().tobytes()
    assert abs(top1_accuracy(model, data.test) - top1_accuracy(SplitModel.load(ck), data.test)) <= 1e-12


def test_pretrain_reaches_95_percent_on_binary_digits():
    cfg = ExperimentConfig(pretrain=True, pretrain_target=0.95, pretrain_max_epochs=60)
    data = build_data(cfg)
    from fedcfa.experiments import make_model, pretrain
    acc = pretrain(cfg, make_model(cfg, data.test.in_dim, 2), data.pretrain_set, data.test)
    assert acc >= 0.95


def test_simpson_fedcfa_50_rounds_csv_and_summary(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["--preset", "simpson", "--algo", "fedcfa", "--rounds", "50", "--seed", "7",
                     "--out", str(out), "--quiet"]) == 0
    rows = list(csv.reader((out / "rounds.csv").open()))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 51
    assert all(len(r) == len(CSV_HEADER) for r in rows)
    summary = json.loads((out / "rounds_summary.json").read_text())
    assert summary["rounds"] == 50 and summary["seed"] == 7
    assert summary["full_scale_settings"]["rounds"] == 500 and summary["desk_settings"]["rounds"] == 50
    assert summary["pretrained_acc"] >= 0.9


def test_checkpoint_every_and_resume(tmp_path):
    out = tmp_path / "r"
    assert cli.main(["--preset", "iid", "--rounds", "4", "--checkpoint-every", "2", "--out", str(out), "--quiet"]) == 0
    ckpts = sorted((out / "checkpoints").iterdir())
    assert [p.name for p in ckpts] == ["round_00002.fcfa", "round_00004.fcfa"]
    rows = list(csv.DictReader((out / "rounds.csv").open()))
    cfg = cli.PRESETS["iid"]
    data = build_data(ExperimentConfig(**cfg))
    acc = top1_accuracy(SplitModel.load(ckpts[-1]), data.test)
    assert abs(acc - float(rows[-1]["test_acc"])) <= 1e-12
    out2 = tmp_path / "r2"
    assert cli.main(["--preset", "iid", "--rounds", "1", "--checkpoint", str(ckpts[-1]), "--out", str(out2), "--quiet"]) == 0


def test_write_config_and_flags_override(tmp_path):
    dump = tmp_path / "resolved.cfg"
    assert cli.main(["--preset", "dirichlet", "--alpha", "0.2", "--topk", "8", "--lambda-neg", "2",
                     "--write-config", str(dump)]) == 0
    cfg = ExperimentConfig.load(dump)
    assert (cfg.partition, cfg.alpha, cfg.topk, cfg.lambda_neg, cfg.clients) == ("dirichlet", 0.2, 8, 2.0, 10)


# --- ablation --------------------------------------------------------------

def test_ablation_rows_and_cls_reduction():
    cfg = ExperimentConfig(**dict(cli.SIMPSON, rounds=3, samples=600))
    rows = ablation(cfg, seeds=(1,))
    assert [r["variant"] for r in rows] == list(ABLATION_VARIANTS)
    direct = run(cfg.replace(seed=1, lambda_pos=0.0, lambda_neg=0.0))
    assert rows[0]["final_acc"][0] == direct.final_acc
