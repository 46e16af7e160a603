import pytest

from smarc.config import (
    DESK_ARCH,
    ArchConfig,
    LossWeights,
    RunConfig,
    TrainConfig,
    apply_values,
    config_snapshot,
    parse_overrides,
    read_config_file,
    resolve_config,
    write_config_file,
)


def test_defaults_validate():
    run = RunConfig().validate()
    assert run.arch.input_size == 224 and run.arch.bottleneck_channels == (1024, 2048)
    assert run.train.phase_a_epochs == 10 and run.train.phase_b_max_epochs == 150
    assert run.train.loss.hole_weight == 6.0 and run.train.loss.lambda_rgb == 0.25
    assert DESK_ARCH.validate().input_size == 32


def test_all_problems_reported_together():
    with pytest.raises(ValueError) as exc:
        ArchConfig(input_size=100, num_classes=1, dropout=1.5).validate()
    msg = str(exc.value)
    assert "3 problem(s)" in msg
    assert "input_size" in msg and "num_classes" in msg and "dropout" in msg


def test_loss_weights_problems():
    assert LossWeights(hole_weight=0, valid_weight=0).problems()
    assert LossWeights(label_smoothing=1.0).problems()
    assert not LossWeights().problems()


def test_train_config_lr_floor():
    with pytest.raises(ValueError, match="min_lr"):
        TrainConfig(phase_b_lr=1e-7).validate()


def test_read_config_file(tmp_path):
    p = tmp_path / "run.conf"
    p.write_text("# desk run\nbatch_size = 8\n\nhead_hidden = 64, 32  # two layers\nbatch_norm = yes\n", encoding="utf-8")
    values = read_config_file(p)
    assert values == {"batch_size": "8", "head_hidden": "64, 32", "batch_norm": "yes"}
    run = resolve_config(p)
    assert run.train.batch_size == 8
    assert run.arch.head_hidden == (64, 32)
    assert run.arch.batch_norm is True


def test_config_file_errors(tmp_path):
    p = tmp_path / "bad.conf"
    p.write_text("batch_size = 8\nbatch_size = 4\nnot a pair\n", encoding="utf-8")
    with pytest.raises(ValueError) as exc:
        read_config_file(p)
    assert "duplicate key 'batch_size'" in str(exc.value)
    assert "line 3" in str(exc.value)
    with pytest.raises(FileNotFoundError):
        read_config_file(tmp_path / "missing.conf")


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "run.conf"
    p.write_text("batch_size = 8\nhole_weight = 4\n", encoding="utf-8")
    run = resolve_config(p, parse_overrides(["batch_size=2", "contrast_range=0.8,1.2"]))
    assert run.train.batch_size == 2
    assert run.train.loss.hole_weight == 4.0
    assert run.train.augment_spec.contrast_range == (0.8, 1.2)


def test_unknown_key_and_bad_value():
    with pytest.raises(ValueError) as exc:
        apply_values(RunConfig(), {"batchsize": "8", "dropout": "lots"})
    assert "unknown key 'batchsize'" in str(exc.value)
    assert "bad value for dropout" in str(exc.value)
    with pytest.raises(ValueError, match="key=value"):
        parse_overrides(["batch_size"])


def test_seed_drives_training_and_split():
    run = apply_values(RunConfig(), {"seed": "7"})
    assert run.train.seed == 7 and run.split.seed == 7


def test_snapshot_file_round_trip(tmp_path):
    run = apply_values(RunConfig(arch=DESK_ARCH), {"batch_size": "4", "stratified": "false", "min_lr": "2e-6"})
    path = write_config_file(tmp_path / "config.txt", run)
    again = resolve_config(path)
    assert config_snapshot(again) == config_snapshot(run)
    assert again == run
