# hiernas/cli.py

import functools
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import click
from loguru import logger

from hiernas import __version__
from hiernas.analytics import build_final_plan, model_stats
from hiernas.common import ExitCode, HierNasError, StartConvention
from hiernas.data import ToyDataset, ToyDatasetSpec, gen_toy_dataset
from hiernas.decoder import decode_snapshot, k_best_paths, strongest_connections
from hiernas.logger import Verbosity, setup_logger
from hiernas.relaxation import snapshot_from_dict, snapshot_to_dict
from hiernas.runner import RetrainRunner, SearchRunner
from hiernas.search_space import count_cell_genotypes, count_paths, genotype_from_dict
from hiernas.segsearch import RetrainConfig, SearchConfig
from hiernas.selftest import SUITES, run_selftest
from hiernas.utils import dump_json, parse_size, read_json, require_dir, require_file, sha256_file, sha256_text, write_json


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: Optional[int]
    artifacts: Dict[str, str] = field(default_factory=dict)
    engine_version: str = __version__
    duration_seconds: float = 0.0

    def write(self, path: Path) -> Path:
        return write_json(path, asdict(self))


def reports_errors(fn):
    """
    Map HierNasError to one `ERR <code>: <message>` line on stderr and its exit code.
    """

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except HierNasError as e:
            logger.debug("{} failed: {!r}", fn.__name__, e)
            click.echo(f"ERR {int(e.exit_code)}: {e}", err=True)
            sys.exit(int(e.exit_code))

    return wrapper


@click.group()
@click.option(
    "--use-verbosity",
    type=click.Choice([v.name for v in Verbosity]),
    default=Verbosity.DEFAULT.name,
    show_default=True,
    help="Logging verbosity",
)
@click.version_option(__version__, prog_name="hiernas")
def main(use_verbosity):
    """
    Hierarchical differentiable architecture search for segmentation:
    counting, toy data, search, decoding, retraining and cost analysis.
    """
    setup_logger(Verbosity[use_verbosity])


@main.command("count-paths")
@click.option("--layers", "num_layers", type=int, required=True, help="Number of searched layers L")
@click.option(
    "--convention",
    type=click.Choice(["both"] + [c.value for c in StartConvention]),
    default="both",
    show_default=True,
    help="Which first-layer factors count as a start",
)
@reports_errors
def count_paths_cmd(num_layers, convention):
    """Print the exact number of valid network paths."""
    if convention != "both":
        click.echo(count_paths(num_layers, StartConvention(convention)))
        return
    for c in (StartConvention.FIRST_LAYER_4, StartConvention.FIRST_LAYER_4_OR_8):
        click.echo(f"{c.value} {count_paths(num_layers, c)}")


@main.command("count-cells")
@click.option("--blocks", type=int, required=True, help="Blocks per cell B")
@click.option("--ops", type=int, default=8, show_default=True, help="Candidate operators")
@reports_errors
def count_cells_cmd(blocks, ops):
    """Print the exact number of cell genotypes."""
    click.echo(count_cell_genotypes(blocks, ops))


@main.command("gen-data")
@click.option("--spec", "spec_file", type=click.Path(path_type=Path), required=True, help="Dataset spec (key = value)")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True, help="Output directory")
@reports_errors
def gen_data_cmd(spec_file, out_dir):
    """Generate the synthetic segmentation dataset."""
    started = time.monotonic()
    spec = ToyDatasetSpec.from_file(require_file(spec_file, "dataset spec"))
    gen_toy_dataset(spec).save(out_dir, spec)
    RunManifest(
        "gen-data",
        sha256_text(spec.to_text()),
        spec.seed,
        {"images": str(out_dir / "images.npy"), "labels": str(out_dir / "labels.npy"), "index": str(out_dir / "index.json")},
        duration_seconds=time.monotonic() - started,
    ).write(out_dir / "manifest.json")


@main.command("search")
@click.option("--config", "config_file", type=click.Path(path_type=Path), required=True, help="Search config (key = value)")
@click.option("--data", "data_dir", type=click.Path(path_type=Path), required=True, help="Dataset directory")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True, help="Output directory")
@reports_errors
def search_cmd(config_file, data_dir, out_dir):
    """Run the bi-level architecture search."""
    started = time.monotonic()
    config = SearchConfig.from_file(require_file(config_file, "search config"))
    dataset = ToyDataset.load(require_dir(data_dir, "dataset directory"))
    result = SearchRunner(config, dataset).run()

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "trace.csv").write_text(result.trace.to_csv(), encoding="utf-8")
    write_json(out_dir / "snapshot.json", snapshot_to_dict(result.snapshot))
    result.params.save(out_dir / "weights.ckpt")
    result.net.arch.save(out_dir / "arch.ckpt")
    (out_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
    RunManifest(
        "search",
        config.digest(),
        config.seed,
        {name: str(out_dir / name) for name in ("trace.csv", "snapshot.json", "weights.ckpt", "arch.ckpt", "config.txt")},
        duration_seconds=time.monotonic() - started,
    ).write(out_dir / "manifest.json")
    logger.success("Search artifacts written to {}", out_dir)


@main.command("decode")
@click.option("--snapshot", "snapshot_file", type=click.Path(path_type=Path), required=True, help="alpha/beta snapshot JSON")
@click.option("--out", "out_file", type=click.Path(path_type=Path), required=True, help="Genotype JSON to write")
@click.option("--k-best", type=int, default=0, show_default=True, help="Log the k most probable paths (debug)")
@click.option("--connections/--no-connections", default=False, show_default=True, help="Log each node's strongest transition")
@reports_errors
def decode_cmd(snapshot_file, out_file, k_best, connections):
    """Decode a snapshot into a cell genotype and a network path."""
    started = time.monotonic()
    source = require_file(snapshot_file, "snapshot")
    snapshot = snapshot_from_dict(read_json(source))
    digest = sha256_file(source)
    decoded = decode_snapshot(snapshot, digest)
    write_json(out_file, decoded.to_dict())

    beta = snapshot.beta_probs()
    if connections:
        for c in strongest_connections(beta, snapshot.trellis):
            logger.info("layer {} factor {} -> {} (p={:.4f})", c.layer, c.source, c.target, c.probability)
    for rank, scored in enumerate(k_best_paths(beta, snapshot.trellis, k_best) if k_best > 0 else [], start=1):
        logger.info("#{} path {} log p={:.4f}", rank, list(scored.path), scored.log_prob)

    RunManifest(
        "decode",
        digest,
        None,
        {"genotype": str(out_file)},
        duration_seconds=time.monotonic() - started,
    ).write(out_file.with_name(out_file.name + ".manifest.json"))
    logger.success("Decoded path {} written to {}", list(decoded.path), out_file)


@main.command("retrain")
@click.option("--genotype", "genotype_file", type=click.Path(path_type=Path), required=True, help="Genotype JSON")
@click.option("--data", "data_dir", type=click.Path(path_type=Path), required=True, help="Dataset directory")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True, help="Output directory")
@click.option("--config", "config_file", type=click.Path(path_type=Path), default=None, help="Retrain config (key = value)")
@click.option("--filter-multiplier", type=int, default=4, show_default=True, help="Filter multiplier F")
@reports_errors
def retrain_cmd(genotype_file, data_dir, out_dir, config_file, filter_multiplier):
    """Train a decoded architecture from scratch and report its mIoU."""
    started = time.monotonic()
    cell, path = genotype_from_dict(read_json(require_file(genotype_file, "genotype")))
    config = RetrainConfig.from_file(require_file(config_file, "retrain config")) if config_file else RetrainConfig()
    dataset = ToyDataset.load(require_dir(data_dir, "dataset directory"))
    result = RetrainRunner(cell, path, filter_multiplier, dataset, config).run()

    out_dir.mkdir(parents=True, exist_ok=True)
    result.params.save(out_dir / "weights.ckpt")
    write_json(
        out_dir / "report.json",
        {
            "miou": result.miou,
            "pixel_accuracy": result.pixel_accuracy,
            "majority_baseline_miou": result.baseline_miou,
            "final_loss": result.final_loss,
            "filter_multiplier": filter_multiplier,
            "path": list(path),
        },
    )
    RunManifest(
        "retrain",
        sha256_text(config.to_text() + sha256_file(genotype_file)),
        config.seed,
        {"weights": str(out_dir / "weights.ckpt"), "report": str(out_dir / "report.json")},
        duration_seconds=time.monotonic() - started,
    ).write(out_dir / "manifest.json")
    click.echo(f"miou {result.miou!r}")


@main.command("analyze")
@click.option("--genotype", "genotype_file", type=click.Path(path_type=Path), required=True, help="Genotype JSON")
@click.option("--filter-multiplier", type=int, required=True, help="Filter multiplier F")
@click.option("--input", "input_size", required=True, help="Input size as HxW, e.g. 512x1024")
@click.option("--num-classes", type=int, default=19, show_default=True, help="Output classes")
@click.option("--aspp-branches", type=click.Choice(["3", "5"]), default="3", show_default=True, help="ASPP variant")
@click.option("--decoder/--no-decoder", default=False, show_default=True, help="Add the low-level decoder")
@click.option("--out", "out_file", type=click.Path(path_type=Path), default=None, help="Write stats JSON here")
@reports_errors
def analyze_cmd(genotype_file, filter_multiplier, input_size, num_classes, aspp_branches, decoder, out_file):
    """Count parameters and multiply-adds of the final model."""
    started = time.monotonic()
    height, width = parse_size(input_size)
    cell, path = genotype_from_dict(read_json(require_file(genotype_file, "genotype")))
    plan = build_final_plan(cell, path, filter_multiplier, num_classes, int(aspp_branches), decoder)
    stats = model_stats(plan, height, width)
    click.echo(stats.to_table(), nl=False)
    if out_file is None:
        return
    write_json(out_file, stats.to_dict())
    RunManifest(
        "analyze",
        sha256_text(dump_json([sha256_file(genotype_file), filter_multiplier, input_size, num_classes, aspp_branches, decoder])),
        None,
        {"stats": str(out_file)},
        duration_seconds=time.monotonic() - started,
    ).write(out_file.with_name(out_file.name + ".manifest.json"))


@main.command("selftest")
@click.option("--suite", "suites", multiple=True, type=click.Choice(list(SUITES)), help="Run only these suites")
@reports_errors
def selftest_cmd(suites):
    """Run the oracle suites; nonzero exit on any failure."""
    results = run_selftest(list(suites))
    for r in results:
        click.echo(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    if not all(r.passed for r in results):
        sys.exit(int(ExitCode.NUMERIC))


if __name__ == "__main__":
    main()
