import numpy as np
import pytest
from conftest import synthetic_series

from modalcast.backbone import BackboneConfig, random_backbone, save_backbone
from modalcast.cli import main
from modalcast.config import RunConfig, parse_config_file
from modalcast.container import read_container
from modalcast.errors import ConfigError


def demo_env(tmp_path, n=400, channels=3, input_len=24, horizons="8",
             epochs=2, extra=""):
    """Tiny backbone container + synthetic CSV + config file."""
    rng = np.random.default_rng(0)
    config = BackboneConfig(layers=2, width=32, heads=4, max_positions=128,
                            vocab_size=50)
    save_backbone(random_backbone(config, rng, dtype=np.float32),
                  tmp_path / "backbone.calf")
    rc = main(["pca-extract", "--weights", str(tmp_path / "backbone.calf"),
               "--d", "6", "--out", str(tmp_path / "principal.calf")])
    assert rc == 0
    series = synthetic_series(n=n, channels=channels, seed=4)
    lines = ["date," + ",".join(series.channels)]
    for stamp, row in zip(series.timestamps, series.values):
        lines.append(stamp + "," + ",".join(f"{v:.6f}" for v in row))
    (tmp_path / "data.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    conf = f"""
seed = 3
out_dir = {tmp_path / 'run'}
dataset.kind = csv
dataset.path = {tmp_path / 'data.csv'}
dataset.split = ratio:0.7:0.1:0.2
window.input_len = {input_len}
window.horizons = {horizons}
backbone.path = {tmp_path / 'backbone.calf'}
backbone.layers = 2
backbone.width = 32
backbone.heads = 4
backbone.max_positions = 128
backbone.vocab = 50
principal.path = {tmp_path / 'principal.calf'}
model.lora_rank = 4
train.epochs = {epochs}
train.batch_size = 16
{extra}
"""
    (tmp_path / "run.conf").write_text(conf, encoding="utf-8")
    return tmp_path


# ---------------------------------------------------------------------------
# config format
# ---------------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    env = demo_env(tmp_path)
    cfg = RunConfig.from_file(env / "run.conf")
    (env / "resolved.conf").write_text(cfg.to_text(), encoding="utf-8")
    again = RunConfig.from_file(env / "resolved.conf")
    assert cfg == again


def test_config_include(tmp_path):
    (tmp_path / "base.conf").write_text("seed = 9\ntrain.epochs = 4\n", encoding="utf-8")
    (tmp_path / "main.conf").write_text("include base.conf\nseed = 11\n", encoding="utf-8")
    values = parse_config_file(tmp_path / "main.conf")
    assert values == {"seed": "11", "train.epochs": "4"}


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.from_mapping({"no.such.key": "1"})


def test_config_bad_value_rejected():
    with pytest.raises(ConfigError, match="bad value"):
        RunConfig.from_mapping({"train.epochs": "soon"})
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"loss.enable_feature": "maybe"})


def test_config_malformed_line(tmp_path):
    (tmp_path / "c.conf").write_text("seed 3\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_file(tmp_path / "c.conf")


# ---------------------------------------------------------------------------
# pca-extract command
# ---------------------------------------------------------------------------

def test_pca_extract_prints_evr_and_round_trips(tmp_path, capsys):
    env = demo_env(tmp_path)
    out = capsys.readouterr().out
    assert "explained_variance_ratio=" in out
    assert "component,variance,cumulative_evr" in out
    first = (env / "principal.calf").read_bytes()
    rc = main(["pca-extract", "--weights", str(env / "backbone.calf"),
               "--d", "6", "--out", str(env / "principal2.calf")])
    assert rc == 0
    assert (env / "principal2.calf").read_bytes() == first  # deterministic re-extract


def test_pca_extract_clamps_excess_d(tmp_path):
    from modalcast.container import write_container
    rng = np.random.default_rng(1)
    low_rank = (rng.standard_normal((50, 5)) @ rng.standard_normal((5, 32)))
    write_container(tmp_path / "lr.calf",
                    {"token_embedding": low_rank.astype(np.float32)})
    with pytest.warns(UserWarning, match="rank"):
        rc = main(["pca-extract", "--weights", str(tmp_path / "lr.calf"),
                   "--d", "20", "--out", str(tmp_path / "p.calf")])
    assert rc == 0
    comps = read_container(tmp_path / "p.calf")["principal.components"]
    assert comps.shape[0] == 5


def test_pca_extract_missing_embedding_is_format_exit(tmp_path):
    from modalcast.container import write_container
    write_container(tmp_path / "empty.calf", {"x": np.zeros(3, dtype=np.float32)})
    rc = main(["pca-extract", "--weights", str(tmp_path / "empty.calf"),
               "--d", "2", "--out", str(tmp_path / "p.calf")])
    assert rc == 4


# ---------------------------------------------------------------------------
# train / eval / zero-shot
# ---------------------------------------------------------------------------

def test_train_eval_cycle(tmp_path, capsys):
    env = demo_env(tmp_path)
    assert main(["train", "--config", str(env / "run.conf")]) == 0
    run = env / "run"
    assert (run / "resolved.conf").exists()
    log = (run / "train.log").read_text(encoding="utf-8")
    assert "step=0 sup=" in log and "grad_norm=" in log
    assert (run / "model_h8.calf").exists()
    capsys.readouterr()
    assert main(["eval", "--config", str(run / "resolved.conf"),
                 "--checkpoint", str(run)]) == 0
    out = capsys.readouterr().out
    assert "horizon=8" in out and "horizon=avg" in out
    csv_text = (run / "eval_metrics.csv").read_text(encoding="utf-8")
    assert csv_text.startswith("metric,horizon,value")


def test_train_fraction_logs_prefix_size(tmp_path):
    env = demo_env(tmp_path, n=1000)
    assert main(["train", "--config", str(env / "run.conf"),
                 "--train-fraction", "0.1",
                 "--out", str(env / "run_few")]) == 0
    log = (env / "run_few" / "train.log").read_text(encoding="utf-8")
    # N_train = 700 rows; floor(0.1 * 700) = 70
    assert "train_rows=70 " in log
    assert "train_fraction=0.1" in log


def test_ablation_flags_zero_their_columns(tmp_path):
    env = demo_env(tmp_path)
    assert main(["train", "--config", str(env / "run.conf"),
                 "--no-feature-loss", "--no-output-loss",
                 "--out", str(env / "run_abl")]) == 0
    log = (env / "run_abl" / "train.log").read_text(encoding="utf-8")
    steps = [l for l in log.splitlines() if l.startswith("step=")]
    assert steps
    assert all("feature=0.000000" in l and "output=0.000000" in l for l in steps)
    assert not all("sup=0.000000" in l for l in steps)


def test_zero_shot_foreign_dataset_other_channel_count(tmp_path, capsys):
    env = demo_env(tmp_path)
    assert main(["train", "--config", str(env / "run.conf")]) == 0
    foreign = synthetic_series(n=200, channels=5, seed=77)
    lines = ["date," + ",".join(foreign.channels)]
    for stamp, row in zip(foreign.timestamps, foreign.values):
        lines.append(stamp + "," + ",".join(f"{v:.6f}" for v in row))
    (env / "foreign.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    capsys.readouterr()
    rc = main(["zero-shot", "--checkpoint", str(env / "run"),
               "--eval-dataset", str(env / "foreign.csv")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "optimizer_steps=0" in out
    assert "mse=" in out and "horizon=avg" in out
    zs = env / "run" / "zero_shot"
    assert (zs / "zero_shot_metrics.csv").exists()


def test_eval_reports_every_horizon_and_mean(tmp_path, capsys):
    env = demo_env(tmp_path, n=600, horizons="6,8,10,12", epochs=1)
    assert main(["train", "--config", str(env / "run.conf")]) == 0
    run = env / "run"
    for h in (6, 8, 10, 12):
        assert (run / f"model_h{h}.calf").exists()
    capsys.readouterr()
    assert main(["eval", "--config", str(run / "resolved.conf"),
                 "--checkpoint", str(run)]) == 0
    out = capsys.readouterr().out
    for h in (6, 8, 10, 12):
        assert f"horizon={h} windows=" in out
    assert "horizon=avg" in out
    csv_lines = (run / "eval_metrics.csv").read_text().splitlines()
    horizons_in_csv = {line.split(",")[1] for line in csv_lines[1:]}
    assert horizons_in_csv == {"6", "8", "10", "12", "avg"}
    # re-running eval from the resolved config reproduces metrics bitwise
    first = (run / "eval_metrics.csv").read_bytes()
    assert main(["eval", "--config", str(run / "resolved.conf"),
                 "--checkpoint", str(run)]) == 0
    assert (run / "eval_metrics.csv").read_bytes() == first


def test_train_reproducible_bitwise(tmp_path):
    env = demo_env(tmp_path)
    assert main(["train", "--config", str(env / "run.conf"),
                 "--out", str(env / "r1")]) == 0
    assert main(["train", "--config", str(env / "run.conf"),
                 "--out", str(env / "r2")]) == 0
    a = (env / "r1" / "model_h8.calf").read_bytes()
    b = (env / "r2" / "model_h8.calf").read_bytes()
    assert a == b


def test_exit_codes(tmp_path):
    env = demo_env(tmp_path)
    # config error: missing file
    assert main(["train", "--config", str(env / "nope.conf")]) == 2
    # format error: corrupt backbone
    (env / "backbone.calf").write_bytes(b"JUNKJUNK")
    assert main(["train", "--config", str(env / "run.conf")]) == 4


def test_data_error_exit_code(tmp_path):
    env = demo_env(tmp_path)
    (env / "data.csv").write_text("date,a\n2020-01-01,oops\n", encoding="utf-8")
    assert main(["train", "--config", str(env / "run.conf")]) == 3


# ---------------------------------------------------------------------------
# M4 through the CLI (mixed horizons via 'others')
# ---------------------------------------------------------------------------

def write_m4_files(dirpath, frequency, horizon, n_series=3, length=160, seed=0):
    rng = np.random.default_rng(seed)
    train_rows, test_rows = [], []
    for i in range(n_series):
        n = length + 7 * i
        vals = np.round(60 + 12 * np.sin(np.arange(n + horizon) / 5 + i)
                        + rng.standard_normal(n + horizon), 3)
        sid = f"{frequency[0].upper()}{i}"
        train_rows.append(f'"{sid}",' + ",".join(map(str, vals[:n])))
        test_rows.append(f'"{sid}",' + ",".join(map(str, vals[n:])))
    (dirpath / f"{frequency.capitalize()}-train.csv").write_text(
        "\n".join(["id,x"] + train_rows) + "\n", encoding="utf-8")
    (dirpath / f"{frequency.capitalize()}-test.csv").write_text(
        "\n".join(["id,x"] + test_rows) + "\n", encoding="utf-8")


def test_m4_train_eval_cycle_mixed_horizons(tmp_path, capsys):
    env = demo_env(tmp_path)  # reuse the backbone + principal
    m4_dir = env / "m4"
    m4_dir.mkdir()
    write_m4_files(m4_dir, "weekly", horizon=13, length=120)
    write_m4_files(m4_dir, "daily", horizon=14, length=120, seed=1)
    conf = (env / "run.conf").read_text(encoding="utf-8")
    conf = conf.replace("dataset.kind = csv", "dataset.kind = m4")
    conf = conf.replace(f"dataset.path = {env / 'data.csv'}",
                        f"dataset.path = {m4_dir}\ndataset.frequency = others")
    conf = conf.replace(f"out_dir = {env / 'run'}", f"out_dir = {env / 'm4run'}")
    conf = conf.replace("train.epochs = 2", "train.epochs = 1")
    (env / "m4.conf").write_text(conf, encoding="utf-8")
    assert main(["train", "--config", str(env / "m4.conf")]) == 0
    run = env / "m4run"
    assert (run / "model_m4_h13.calf").exists()
    assert (run / "model_m4_h14.calf").exists()
    capsys.readouterr()
    assert main(["eval", "--config", str(run / "resolved.conf"),
                 "--checkpoint", str(run)]) == 0
    out = capsys.readouterr().out
    assert "horizon=13" in out and "horizon=14" in out
    assert "pooled" in out and "owa=" in out
    csv_text = (run / "eval_metrics.csv").read_text(encoding="utf-8")
    assert "smape,pooled," in csv_text and "owa,13," in csv_text


# ---------------------------------------------------------------------------
# export-attention
# ---------------------------------------------------------------------------

def test_export_attention_outputs(tmp_path, capsys):
    env = demo_env(tmp_path)
    assert main(["train", "--config", str(env / "run.conf")]) == 0
    vocab = "\n".join(f"tok{i}" for i in range(50))
    (env / "tokens.txt").write_text(vocab + "\n", encoding="utf-8")
    capsys.readouterr()
    rc = main(["export-attention", "--checkpoint", str(env / "run"),
               "--words", "tok3,tok7,zzz", "--vocab", str(env / "tokens.txt"),
               "--out", str(env / "attn")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "skipped words not in vocabulary: zzz" in out

    attn_lines = (env / "attn" / "attention_principal.csv").read_text().splitlines()
    assert len(attn_lines) == 1 + 3  # header + one row per channel
    for line in attn_lines[1:]:
        row = [float(v) for v in line.split(",")[1:]]
        assert abs(sum(row) - 1.0) < 1e-6
        assert all(v >= 0 for v in row)

    rel_lines = (env / "attn" / "word_relevance.csv").read_text().splitlines()
    assert rel_lines[0] == "channel,tok3,tok7"
    for line in rel_lines[1:]:
        row = [float(v) for v in line.split(",")[1:]]
        assert abs(sum(row) - 1.0) < 1e-6

    assert (env / "attn" / "features_time.csv").exists()
    assert (env / "attn" / "features_text.csv").exists()

    # re-export is byte-identical
    first = (env / "attn" / "attention_principal.csv").read_bytes()
    assert main(["export-attention", "--checkpoint", str(env / "run"),
                 "--words", "tok3,tok7", "--vocab", str(env / "tokens.txt"),
                 "--out", str(env / "attn2")]) == 0
    assert (env / "attn2" / "attention_principal.csv").read_bytes() == first
