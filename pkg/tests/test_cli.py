import csv
import subprocess
import sys

import pytest

from conftest import count_layout
from vggfinetune.cli import main, parse_config, parse_config_text, resolve_positive
from vggfinetune.errors import ConfigurationError
from vggfinetune.model import build, freeze_features, init_weights
from vggfinetune.weightfile import load_weights, save_weights


class TestConfig:
    def test_binary_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("")
        cfg = parse_config(path, {"task": "binary"})
        assert (cfg.batch_size, cfg.epochs, cfg.learning_rate) == (24, 12, 1e-4)
        assert (cfg.arch, cfg.freeze, cfg.rotation, cfg.flip_prob) == ("vgg16", "head-only", 15.0, 0.5)

    def test_multiclass_epochs(self):
        cfg = parse_config(None, {"task": "multiclass", **parse_config_text("epochs = 16\n")})
        assert (cfg.batch_size, cfg.epochs) == (32, 16)

    def test_file_values_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# experiment\narch = vgg19\nlr = 0.001   # tuned\nbatch = 8\naugment-validation = no\n")
        cfg = parse_config(path, {"batch_size": 4, "arch": None})
        assert (cfg.arch, cfg.learning_rate, cfg.batch_size, cfg.augment_validation) == ("vgg19", 1e-3, 4, False)

    def test_bad_value_names_line(self):
        with pytest.raises(ConfigurationError, match="line 2") as exc:
            parse_config_text("arch = vgg16\nlearning_rate = banana\n")
        assert exc.value.line == 2

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="line 1"):
            parse_config_text("momentum = 0.9")
        with pytest.raises(ConfigurationError, match="line 3"):
            parse_config_text("\n\njust words")

    @pytest.mark.parametrize("kw", [{"arch": "vgg11"}, {"task": "regression"}, {"freeze": "half"},
                                    {"learning_rate": -1.0}, {"flip_prob": 2.0}])
    def test_invalid_combination(self, kw):
        with pytest.raises(ConfigurationError):
            parse_config(None, kw)

    def test_positive_class(self):
        assert resolve_positive(["COVID-19", "Normal"], None) == 0
        assert resolve_positive(["non_covid", "covid"], None) == 1
        assert resolve_positive(["a", "b"], None) is None
        assert resolve_positive(["a", "b"], "b") == 1
        with pytest.raises(ConfigurationError):
            resolve_positive(["a", "b"], "c")


class TestCommands:
    def test_inspect(self, capsys):
        assert main(["inspect", "--arch", "vgg16", "--task", "multiclass"]) == 0
        out = capsys.readouterr().out
        assert "weight layers: 16 (13 conv + 3 dense)" in out
        assert "total 24,416,579" in out
        assert "trainable 9,701,891" in out
        assert "flatten width: 18432" in out

    def test_inspect_vgg19(self, capsys):
        assert main(["inspect", "--arch", "vgg19", "--task", "binary", "--freeze", "full"]) == 0
        out = capsys.readouterr().out
        assert "weight layers: 19 (16 conv + 3 dense)" in out
        assert "frozen 0" in out

    def test_gradcheck(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        for kernel in ("conv2d", "dense", "relu", "dropout", "softmax_cross_entropy", "sigmoid_binary_loss"):
            assert kernel in out
        assert "FAIL" not in out

    def test_split_dataset1(self, tmp_path, capsys):
        data = count_layout(tmp_path / "data", {"covid": 278, "non_covid": 978})
        out = tmp_path / "out"
        assert main(["split", "--data", str(data), "--out", str(out)]) == 0
        with open(out / "splits.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1256
        assert sum(r["class"] == "covid" and r["partition"] == "test" for r in rows) == 56
        first = (out / "splits.csv").read_bytes()
        assert main(["split", "--data", str(data), "--out", str(out)]) == 0
        assert (out / "splits.csv").read_bytes() == first

    def test_train_evaluate_predict(self, tmp_path, image_dataset, capsys):
        data = image_dataset()
        runs = []
        for name in ("a", "b"):
            out = tmp_path / name
            args = ["--data", str(data), "--out", str(out), "--tiny", "--epochs", "2", "--seed", "3"]
            assert main(["train", *args]) == 0
            assert main(["evaluate", *args]) == 0
            runs.append(out)
        text = capsys.readouterr().out
        assert "not the published setup" in text
        for fname in ("weights.vggw", "splits.csv", "epochs.csv", "metrics.csv", "confusion.csv"):
            assert (runs[0] / fname).read_bytes() == (runs[1] / fname).read_bytes(), fname

        metrics = (runs[0] / "metrics.csv").read_text().splitlines()
        assert metrics[0].startswith("model,task,precision,recall,f1,accuracy")
        assert metrics[2].endswith("positive:covid")
        confusion = (runs[0] / "confusion.csv").read_text().splitlines()
        assert confusion[0] == "covid,non_covid"
        assert sum(int(v) for line in confusion[1:] for v in line.split(",")[1:]) == 2 * 2

        img = sorted((data / "covid").iterdir())[0]
        assert main(["predict", "--tiny", "--out", str(runs[0]), str(img)]) == 0
        line = capsys.readouterr().out.strip()
        assert line.startswith(str(img)) and "covid=" in line and "non_covid=" in line

    def test_evaluate_uses_only_artifacts(self, tmp_path, image_dataset, capsys):
        data = image_dataset()
        out = tmp_path / "run"
        assert main(["split", "--data", str(data), "--out", str(out)]) == 0
        graph = freeze_features(build("vgg16", "binary", tiny=True))
        save_weights(init_weights(graph, 1), out / "weights.vggw", graph=graph)
        assert main(["evaluate", "--tiny", "--out", str(out)]) == 0
        assert (out / "metrics.csv").exists()

    def test_frozen_convs_match_initial(self, tmp_path, image_dataset):
        data = image_dataset()
        out = tmp_path / "run"
        assert main(["train", "--data", str(data), "--out", str(out), "--tiny", "--epochs", "1"]) == 0
        graph = freeze_features(build("vgg16", "binary", tiny=True))
        trained = load_weights(out / "weights.vggw", graph)
        initial = init_weights(graph, 0)
        for layer in graph.weight_layers():
            same = trained[layer.name][0].tobytes() == initial[layer.name][0].tobytes()
            assert same == (layer.kind == "conv")

    def test_pretrained_features_file(self, tmp_path, image_dataset, capsys):
        data = image_dataset()
        graph = build("vgg16", "binary", tiny=True)
        pre = tmp_path / "features.vggw"
        save_weights(init_weights(graph, 42), pre, features_only=True, graph=graph)
        out = tmp_path / "run"
        assert main(["train", "--data", str(data), "--out", str(out), "--tiny", "--epochs", "1",
                     "--weights", str(pre)]) == 0
        assert "no pretrained weights" not in capsys.readouterr().out
        trained = load_weights(out / "weights.vggw", graph)
        assert trained["conv5_3"][0].tobytes() == init_weights(graph, 42)["conv5_3"][0].tobytes()


class TestErrors:
    def test_bad_config_exits_nonzero(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("arch = vgg16\n\n\nlearning_rate = banana\n")
        assert main(["inspect", "--config", str(cfg)]) == 1
        err = capsys.readouterr().err
        assert err.startswith("vggfinetune: error: ConfigurationError: line 4:")
        assert err.count("\n") == 1

    def test_missing_data(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
        assert "vggfinetune: error:" in capsys.readouterr().err

    def test_empty_dataset(self, tmp_path, capsys):
        (tmp_path / "d").mkdir()
        assert main(["split", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "o")]) == 1
        assert "NoClassesError" in capsys.readouterr().err

    def test_evaluate_without_manifest(self, tmp_path, capsys):
        assert main(["evaluate", "--tiny", "--out", str(tmp_path)]) == 1
        assert "split manifest" in capsys.readouterr().err

    def test_weight_mismatch(self, tmp_path, image_dataset, capsys):
        data = image_dataset()
        out = tmp_path / "run"
        assert main(["train", "--data", str(data), "--out", str(out), "--tiny", "--epochs", "1"]) == 0
        capsys.readouterr()
        assert main(["evaluate", "--tiny", "--arch", "vgg19", "--out", str(out)]) == 1
        assert "ArchitectureMismatchError" in capsys.readouterr().err

    def test_unknown_command(self):
        proc = subprocess.run([sys.executable, "-m", "vggfinetune", "fly"], capture_output=True, text=True)
        assert proc.returncode == 2
        assert "vggfinetune: error:" in proc.stderr

    def test_stray_positional(self, capsys):
        assert main(["inspect", "extra.png"]) == 1
