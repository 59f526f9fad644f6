"""Command-line orchestration over a single run-directory convention.

Subcommands: ingest, split, prompt, run, score, export-finetune. Exit codes
are a stable contract: 0 success, 1 usage/config error, 2 data error,
3 backend error.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import click

from . import evaluation, inference, promptkit, recall_data
from .errors import BackendError, ConfigError, DataError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3

PARTITION_NAME = "partition.json"

_BOOL_VALUES = {"1": True, "true": True, "yes": True,
                "0": False, "false": False, "no": False}


@dataclass
class RunConfig:
    participants: Path | None = None
    recalls: Path | None = None
    truth: Path | None = None
    nutrient_table: Path | None = None
    output_dir: Path = Path("out")
    backend: inference.BackendConfig = field(default_factory=inference.BackendConfig)
    n_subsets: int = 10
    seed: int = 0
    first_subset_extra: bool = True
    shuffle: bool = True
    prompt_fidelity: str = "verbatim"
    day: int = 2
    strict: bool = False
    allow_partial: bool = False

    def resolved(self) -> dict:
        """Flat JSON-ready snapshot for run manifests."""
        snapshot = asdict(self)
        for key in ("participants", "recalls", "truth", "nutrient_table", "output_dir"):
            if snapshot[key] is not None:
                snapshot[key] = str(snapshot[key])
        return snapshot


_PATH_KEYS = ("participants", "recalls", "truth", "nutrient_table", "output_dir")
_INT_KEYS = ("n_subsets", "seed", "day")
_BOOL_KEYS = ("first_subset_extra", "shuffle")
_BACKEND_STR_KEYS = {"backend": "kind", "endpoint_url": "endpoint_url",
                     "model_name": "model_name"}
_BACKEND_NUM_KEYS = {"temperature": float, "request_timeout": float,
                     "max_output_tokens": int, "max_retries": int, "parallelism": int}


def parse_config_file(path: Path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment. Secrets stay in env vars."""
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}, line {line_no}: expected key = value")
        key, _, value = stripped.partition("=")
        value = value.split("#", 1)[0]  # inline comments
        values[key.strip()] = value.strip()
    return values


def build_config(file_values: dict[str, str]) -> RunConfig:
    config = RunConfig()
    backend_kwargs: dict = {}
    for key, raw in file_values.items():
        if key in _PATH_KEYS:
            setattr(config, key, Path(raw))
        elif key in _INT_KEYS:
            try:
                setattr(config, key, int(raw))
            except ValueError:
                raise ConfigError(f"config key {key!r} must be an integer, got {raw!r}") from None
        elif key in _BOOL_KEYS:
            if raw.lower() not in _BOOL_VALUES:
                raise ConfigError(f"config key {key!r} must be a boolean, got {raw!r}")
            setattr(config, key, _BOOL_VALUES[raw.lower()])
        elif key == "prompt_fidelity":
            config.prompt_fidelity = raw
        elif key in _BACKEND_STR_KEYS:
            backend_kwargs[_BACKEND_STR_KEYS[key]] = raw
        elif key in _BACKEND_NUM_KEYS:
            try:
                backend_kwargs[key] = _BACKEND_NUM_KEYS[key](raw)
            except ValueError:
                raise ConfigError(f"config key {key!r} must be numeric, got {raw!r}") from None
        else:
            raise ConfigError(f"unknown config key {key!r}")
    config.backend = inference.BackendConfig(**backend_kwargs)
    return config


def _require(config: RunConfig, *keys: str) -> None:
    for key in keys:
        if getattr(config, key) is None:
            raise ConfigError(f"config is missing required path {key!r}")


def _load_filtered(config: RunConfig) -> tuple[recall_data.Cohort, recall_data.FilterReport]:
    _require(config, "participants", "recalls", "truth")
    cohort = recall_data.load_cohort(config.participants, config.recalls,
                                     config.truth, day=config.day)
    return recall_data.filter_eligible(cohort)


def _partition_path(config: RunConfig) -> Path:
    return config.output_dir / PARTITION_NAME


def _subset_ids(config: RunConfig, subset: int) -> list[str]:
    partition = recall_data.read_partition(_partition_path(config))
    if not 1 <= subset <= len(partition.subsets):
        raise ConfigError(
            f"subset must be between 1 and {len(partition.subsets)}, got {subset}")
    return sorted(partition.subsets[subset - 1])


@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path),
              default=None, help="Flat key=value configuration file.")
@click.option("--seed", type=int, default=None, help="Override the partition seed.")
@click.option("--strict", is_flag=True, help="Disable parser punctuation tolerance.")
@click.option("--no-shuffle", is_flag=True, help="Partition in file order, no shuffle.")
@click.option("--allow-partial", is_flag=True, help="Score interrupted runs as-is.")
@click.pass_context
def cli(ctx, config_path, seed, strict, no_shuffle, allow_partial):
    """Batch evaluation harness for text-only nutrient estimation."""
    config = build_config(parse_config_file(config_path)) if config_path else RunConfig()
    if seed is not None:
        config.seed = seed
    if strict:
        config.strict = True
    if no_shuffle:
        config.shuffle = False
    if allow_partial:
        config.allow_partial = True
    ctx.obj = config


@cli.command()
@click.pass_obj
def ingest(config: RunConfig):
    """Load the cohort and report eligibility filtering counts."""
    cohort, report = _load_filtered(config)
    click.echo(f"{report.n_loaded} loaded, {report.n_eligible} eligible")
    click.echo(f"removed: age {report.removed_age}, "
               f"breastfeeding {report.removed_breastfeeding}, "
               f"recall quality {report.removed_quality}")
    click.echo(f"eligible rows: {cohort.n_recalls} day-{cohort.day} recalls, "
               f"{cohort.n_truths} ground truths")


@cli.command()
@click.pass_obj
def split(config: RunConfig):
    """Partition the eligible cohort and write partition.json."""
    cohort, _ = _load_filtered(config)
    partition = recall_data.partition_cohort(
        list(cohort.participants), config.n_subsets,
        first_subset_extra=config.first_subset_extra,
        seed=config.seed, shuffle=config.shuffle)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    path = recall_data.write_partition(partition, _partition_path(config))
    click.echo(f"subset sizes: {' '.join(str(s) for s in partition.sizes)}")
    click.echo(f"wrote {path}")


@cli.command()
@click.argument("participant_id")
@click.pass_obj
def prompt(config: RunConfig, participant_id: str):
    """Render one participant's prompt bundle to stdout for inspection."""
    cohort, _ = _load_filtered(config)
    recall = cohort.recalls.get(participant_id)
    if recall is None:
        raise DataError(f"no day-{cohort.day} recall for participant {participant_id!r}")
    template = promptkit.load_template(config.prompt_fidelity)
    bundle = promptkit.render_prompt(
        template, recall_data.render_food_string(recall), participant_id)
    click.echo("--- SYSTEM ---")
    click.echo(bundle.system_message)
    click.echo("--- USER ---")
    click.echo(bundle.user_message)


@cli.command()
@click.option("--subset", type=int, required=True, help="1-based subset index.")
@click.option("--run-dir", "run_dir", type=click.Path(path_type=Path), default=None,
              help="Run directory (default: <output_dir>/runs/subset_<N>).")
@click.pass_obj
def run(config: RunConfig, subset: int, run_dir: Path | None):
    """Render prompts for a subset, run inference, persist the run."""
    cohort, _ = _load_filtered(config)
    ids = _subset_ids(config, subset)
    template = promptkit.load_template(config.prompt_fidelity)
    bundles = []
    for pid in ids:
        recall = cohort.recalls.get(pid)
        if recall is None:
            raise DataError(f"no day-{cohort.day} recall for subset participant {pid!r}")
        bundles.append(promptkit.render_prompt(
            template, recall_data.render_food_string(recall), pid))

    table = None
    if config.backend.kind == "table_oracle":
        _require(config, "nutrient_table")
        table = inference.NutrientTable.from_csv(config.nutrient_table)
    backend = inference.build_backend(config.backend, truths=cohort.truths,
                                      table=table, recalls=cohort.recalls)

    if run_dir is None:
        run_dir = config.output_dir / "runs" / f"subset_{subset}"
    metadata = {
        "config": config.resolved(),
        "seed": config.seed,
        "subset_index": subset,
        "prompt_fidelity": config.prompt_fidelity,
        "prompt_fixture_sha256": promptkit.fixture_checksum(),
        "n_expected": len(bundles),
        "started_at": inference.utc_now_iso(),
    }
    inference.write_running_manifest(metadata, run_dir)
    with (run_dir / inference.RESULTS_NAME).open("w", encoding="utf-8", newline="\n") as live:
        results = inference.run_inference(bundles, config.backend,
                                          backend=backend, live_log=live)
    inference.persist_run(results, metadata, run_dir)
    failures = sum(1 for r in results if r.failure)
    click.echo(f"persisted {len(results)} results to {run_dir}"
               + (f" ({failures} failed requests)" if failures else ""))


@cli.command()
@click.argument("run_dir", type=click.Path(path_type=Path))
@click.pass_obj
def score(config: RunConfig, run_dir: Path):
    """Score a persisted run: metrics JSON, text table, Bland-Altman SVGs."""
    cohort, _ = _load_filtered(config)
    metrics, report = evaluation.score_run(run_dir, cohort.truths,
                                           strict=config.strict,
                                           allow_partial=config.allow_partial)
    report_dict = evaluation.metrics_report_dict(metrics, report,
                                                 strict_parser=config.strict)
    (run_dir / "metrics.json").write_text(
        json.dumps(report_dict, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table_text = evaluation.format_metrics_table(metrics, report)
    (run_dir / "metrics.txt").write_text(table_text, encoding="utf-8")

    pairs = evaluation.valid_pairs_from_run(run_dir, cohort.truths,
                                            strict=config.strict,
                                            allow_partial=config.allow_partial)
    if len(pairs) >= 2:
        summary = evaluation.bland_altman(pairs)
        for nutrient in recall_data.NUTRIENT_FIELDS:
            svg = evaluation.render_bland_altman_svg(summary, nutrient)
            (run_dir / f"bland_altman_{nutrient}.svg").write_text(svg, encoding="utf-8")
    else:
        click.echo("too few valid pairs for Bland-Altman plots", err=True)
    click.echo(table_text, nl=False)


@cli.command("export-finetune")
@click.option("--subset", type=int, default=1, show_default=True,
              help="1-based subset index to export.")
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None,
              help="Output JSONL path (default: <output_dir>/finetune_subset_<N>.jsonl).")
@click.pass_obj
def export_finetune(config: RunConfig, subset: int, out_path: Path | None):
    """Export the fine-tuning JSONL for a partition subset."""
    cohort, _ = _load_filtered(config)
    ids = _subset_ids(config, subset)
    template = promptkit.load_template(config.prompt_fidelity)
    if out_path is None:
        out_path = config.output_dir / f"finetune_subset_{subset}.jsonl"
    path = promptkit.export_finetune_dataset(cohort, ids, template, out_path)
    click.echo(f"wrote {len(ids)} examples to {path}")


def main(argv: list[str] | None = None) -> int:
    """Run the CLI, mapping exceptions onto the documented exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_USAGE
    except BackendError as exc:
        click.echo(f"backend error: {exc}", err=True)
        return EXIT_BACKEND
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except OSError as exc:
        click.echo(f"io error: {exc}", err=True)
        return EXIT_DATA
    return EXIT_OK


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
