import json

import numpy as np
import pytest
from click.testing import CliRunner
from loguru import logger

from hiernas.cli import main
from hiernas.network import one_hot_alpha, path_beta
from hiernas.relaxation import ArchSnapshot, beta_mask, snapshot_to_dict
from hiernas.search_space import NetworkPath, build_trellis, genotype_to_dict
from hiernas.utils import write_json

SEARCH_CONFIG = """\
# tiny search for tests
num_layers = 2
num_blocks = 1
filter_multiplier = 2
epochs = 2
arch_delay_epochs = 1
batch_size = 2
crop_size = 32
seed = 0
"""

DATA_SPEC = "num_images = 4\nheight = 32\nwidth = 32\nnum_classes = 3\nseed = 1\n"


@pytest.fixture(autouse=True)
def drop_sinks():
    yield
    logger.remove()


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(main, ["--use-verbosity", "SILENT", *map(str, args)])


def test_count_paths_both(runner):
    result = invoke(runner, "count-paths", "--layers", 12, "--convention", "both")
    assert result.exit_code == 0
    assert result.output.splitlines() == ["first4 28657", "first4or8 75025"]


def test_count_paths_single_convention(runner):
    result = invoke(runner, "count-paths", "--layers", 12, "--convention", "first4")
    assert result.output.strip() == "28657"


def test_count_cells(runner):
    result = invoke(runner, "count-cells", "--blocks", 5, "--ops", 8)
    assert result.exit_code == 0
    assert result.output.strip() == "556627761561600"


def test_invalid_layers_exit_code(runner):
    result = invoke(runner, "count-paths", "--layers", 0)
    assert result.exit_code == 2
    assert result.output.startswith("ERR 2:")


def test_missing_file_is_a_usage_error(runner, tmp_path):
    result = invoke(runner, "decode", "--snapshot", tmp_path / "none.json", "--out", tmp_path / "g.json")
    assert result.exit_code == 2
    assert "ERR 2: snapshot not found" in result.output


def test_invalid_config_is_a_validation_error(runner, tmp_path):
    (tmp_path / "search.cfg").write_text("epochs = 2\narch_delay_epochs = 3\n")
    invoke(runner, "gen-data", "--spec", _write(tmp_path / "data.spec", DATA_SPEC), "--out", tmp_path / "data")
    result = invoke(runner, "search", "--config", tmp_path / "search.cfg", "--data", tmp_path / "data", "--out", tmp_path / "run")
    assert result.exit_code == 3
    assert result.output.startswith("ERR 3: invalid search config")


def test_decode_one_hot_snapshot(runner, tmp_path, cell2):
    trellis = build_trellis(3)
    path = NetworkPath((8, 8, 4))
    snap = ArchSnapshot(
        2,
        trellis,
        np.where(one_hot_alpha(cell2) > 0, 40.0, 0.0),
        np.where(path_beta(path) > 0, 40.0, 0.0) * beta_mask(trellis),
    )
    source = write_json(tmp_path / "snapshot.json", snapshot_to_dict(snap))
    result = invoke(runner, "decode", "--snapshot", source, "--out", tmp_path / "genotype.json", "--k-best", 3, "--connections")
    assert result.exit_code == 0, result.output
    decoded = json.loads((tmp_path / "genotype.json").read_text())
    expected = genotype_to_dict(cell2, path)
    assert {k: decoded[k] for k in expected} == expected
    manifest = json.loads((tmp_path / "genotype.json.manifest.json").read_text())
    assert manifest["command"] == "decode"
    assert manifest["artifacts"] == {"genotype": str(tmp_path / "genotype.json")}


def test_analyze_prints_table_and_writes_stats(runner, tmp_path, cell3, path4):
    genotype = write_json(tmp_path / "g.json", genotype_to_dict(cell3, path4))
    result = invoke(
        runner, "analyze", "--genotype", genotype, "--filter-multiplier", 8, "--input", "64x128", "--out", tmp_path / "stats.json"
    )
    assert result.exit_code == 0, result.output
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert result.output.splitlines()[-1].split()[1:] == [str(stats["params"]), str(stats["multiply_adds"])]
    assert (tmp_path / "stats.json.manifest.json").is_file()


@pytest.mark.parametrize("size", ["64by64", "100x64"])
def test_analyze_rejects_bad_sizes(runner, tmp_path, cell3, path4, size):
    genotype = write_json(tmp_path / "g.json", genotype_to_dict(cell3, path4))
    result = invoke(runner, "analyze", "--genotype", genotype, "--filter-multiplier", 8, "--input", size)
    assert result.exit_code == 2
    assert result.output.startswith("ERR 2:")


def _write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _pipeline(runner, root):
    spec = _write(root / "data.spec", DATA_SPEC)
    config = _write(root / "search.cfg", SEARCH_CONFIG)
    retrain_cfg = _write(root / "retrain.cfg", "epochs = 1\ncrop_size = 32\nseed = 0\n")
    for args in (
        ("gen-data", "--spec", spec, "--out", root / "data"),
        ("search", "--config", config, "--data", root / "data", "--out", root / "search"),
        ("decode", "--snapshot", root / "search" / "snapshot.json", "--out", root / "genotype.json"),
        (
            "retrain",
            "--genotype", root / "genotype.json",
            "--data", root / "data",
            "--out", root / "retrain",
            "--config", retrain_cfg,
            "--filter-multiplier", 2,
        ),
    ):
        result = invoke(runner, *args)
        assert result.exit_code == 0, (args[0], result.output)
    return result


def test_end_to_end_is_reproducible(runner, tmp_path):
    _pipeline(runner, tmp_path / "a")
    _pipeline(runner, tmp_path / "b")
    a, b = tmp_path / "a", tmp_path / "b"

    assert (a / "search" / "trace.csv").read_text().splitlines()[0] == "epoch,lossA,lossB,miou,lr,alpha_entropy,beta_entropy"
    assert len((a / "search" / "trace.csv").read_text().splitlines()) == 3
    for name in ("manifest.json", "snapshot.json", "weights.ckpt", "arch.ckpt"):
        assert (a / "search" / name).is_file()
    assert (a / "data" / "manifest.json").is_file()

    assert (a / "genotype.json").read_bytes() == (b / "genotype.json").read_bytes()
    report_a = json.loads((a / "retrain" / "report.json").read_text())
    report_b = json.loads((b / "retrain" / "report.json").read_text())
    assert report_a["miou"] == report_b["miou"]
    manifest = json.loads((a / "retrain" / "manifest.json").read_text())
    assert manifest["command"] == "retrain" and manifest["seed"] == 0


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda p: p["alpha"]["alpha[0][0]"].__setitem__(0, "x"),
        lambda p: p["beta"]["beta[0][4]"].__setitem__(1, "high"),
        lambda p: p.__setitem__("num_layers", "abc"),
        lambda p: p.__setitem__("num_layers", 0),
    ],
)
def test_decode_non_numeric_snapshot_is_a_validation_error(runner, tmp_path, cell2, corrupt):
    trellis = build_trellis(3)
    snap = ArchSnapshot(2, trellis, one_hot_alpha(cell2), path_beta(NetworkPath((8, 8, 4))) * beta_mask(trellis))
    payload = snapshot_to_dict(snap)
    corrupt(payload)
    source = write_json(tmp_path / "snapshot.json", payload)
    result = invoke(runner, "decode", "--snapshot", source, "--out", tmp_path / "genotype.json")
    assert result.exit_code == 3, result.output
    assert result.output.startswith("ERR 3: malformed snapshot")
