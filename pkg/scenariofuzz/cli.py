import json
import logging
import shutil
import sys
from importlib import resources
from pathlib import Path

import click

from .agents import make_agent
from .analysis import analyze_errors, replay as replay_error
from .config import load_config, resolve_state_dir
from .corpus import CorpusParams, build_corpus, corpus_path, load_corpus, save_corpus
from .errors import ConfigError, InsufficientData, ScenarioFuzzError, on_exception_hints
from .fuzzer import Budget, FuzzConfig, run_campaign
from .logdb import append_event
from .map_model import build_topology, load_map
from .report import write_report
from .sem import SemConfig, build_model, evaluate_metrics, latest_checkpoint, load_checkpoint, save_checkpoint, train
from .state import RECORDS_FILE, SEM_DIR, CampaignState, RecordEntry, load_scene

logger = logging.getLogger(__name__)
package_logger = logging.getLogger("scenariofuzz")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ERRORS_FOUND = 2
EXIT_FAULT = 3

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_cli_logging(state_dir: Path, level: str = "INFO") -> None:
    """Console logging at `level`, plus everything at DEBUG in <state>/cli.log."""
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)
    package_logger.setLevel(logging.DEBUG)
    for h in list(package_logger.handlers):
        if getattr(h, "_scenariofuzz_cli", False):
            package_logger.removeHandler(h)
            h.close()
    try:
        state_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(state_dir / "cli.log")
        fh.setLevel(logging.DEBUG)
        fh.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
        fh._scenariofuzz_cli = True
        package_logger.addHandler(fh)
    except OSError:
        pass


def _fixture_or_path(value: str) -> Path:
    """Accept a real path or the name of a bundled fixture map (e.g. cross_small.xodr)."""
    path = Path(value)
    if path.exists():
        return path
    name = path.name if path.suffix else f"{path.name}.xodr"
    bundled = resources.files("scenariofuzz") / "fixtures" / name
    if bundled.is_file():
        return Path(str(bundled))
    raise click.BadParameter(f"no such map file or bundled fixture: {value}", param_hint="--map")


def _single_map(state_dir: Path, configured) -> str:
    if configured:
        return configured
    found = sorted(p.stem for p in (state_dir / "corpus").glob("*.json"))
    if len(found) != 1:
        raise ConfigError(
            f"set campaign.map: {state_dir / 'corpus'} holds {len(found)} corpora ({', '.join(found) or 'none'})"
        )
    return found[0]


def _build_corpus(map_file: Path, out: Path, corpus_cfg: dict):
    params = CorpusParams(**{k: v for k, v in corpus_cfg.items() if k != "map_file"})
    net = load_map(map_file)
    g = build_topology(net, params.spacing)
    corpus = build_corpus(net, g, params)
    path = save_corpus(corpus, out / "corpus")
    shutil.copyfile(map_file, path.with_suffix(".xodr"))
    return corpus, path


@click.group()
@click.option("--rng-seed", type=int, default=None, help="Seed for every stochastic component")
@click.option("--state-dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Campaign state directory (default: $SCENARIOFUZZ_STATE or ./state)")
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              default="INFO", help="Console log level")
@click.pass_context
def main(ctx, rng_seed, state_dir, log_level):
    """Scenario fuzzing for autonomous driving agents."""
    ctx.ensure_object(dict)
    ctx.obj["rng_seed"] = rng_seed
    ctx.obj["state_dir"] = resolve_state_dir(state_dir)
    setup_cli_logging(ctx.obj["state_dir"], log_level)


# ---------------------------------------------------------------- corpus


@main.group()
def corpus():
    """Seed corpus commands."""


@corpus.command(name="build")
@click.option("--map", "map_file", required=True, help="OpenDRIVE file or bundled fixture name")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="State directory to write corpus/<map>.json into (default: --state-dir)")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def corpus_build(ctx, map_file, out, config_path):
    """Crawl a map into scenario seeds."""
    map_path = _fixture_or_path(map_file)
    out = out or ctx.obj["state_dir"]
    config = load_config(config_path)
    built, path = _build_corpus(map_path, out, config["corpus"])
    kinds = {}
    for s in built.seeds:
        kinds[s.road_type] = kinds.get(s.road_type, 0) + 1
    click.echo(f"✅ {len(built.seeds)} seeds from {map_path.name} -> {path}")
    for kind, count in sorted(kinds.items()):
        click.echo(f"   {kind}: {count}")
    return EXIT_OK


# ---------------------------------------------------------------- fuzz


@main.group()
def fuzz():
    """Fuzzing campaign commands."""


@fuzz.command(name="run")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--agent", "agent_name", default="basic", help="Agent under test: basic, weak or stdio")
@click.option("--budget", default="200", help="Execution count (200) or wall-clock duration (10m)")
@click.option("--resume", is_flag=True, help="Continue the campaign stored in the state directory")
@click.pass_context
def fuzz_run(ctx, config_path, agent_name, budget, resume):
    """Run a fuzzing campaign against an agent."""
    state_dir = ctx.obj["state_dir"]
    config = load_config(config_path)
    if ctx.obj["rng_seed"] is not None:
        config["campaign"]["rng_seed"] = ctx.obj["rng_seed"]
    if resume:
        config["campaign"]["resume"] = True

    map_file = config["corpus"]["map_file"]
    if map_file and not config["campaign"]["map"]:
        config["campaign"]["map"] = _fixture_or_path(map_file).stem
    map_name = _single_map(state_dir, config["campaign"]["map"])
    config["campaign"]["map"] = map_name
    if map_file and not corpus_path(state_dir, map_name).exists():
        _build_corpus(_fixture_or_path(map_file), state_dir, config["corpus"])

    cfg = FuzzConfig.from_config(config)
    seeds = load_corpus(corpus_path(state_dir, map_name))
    scene = load_scene(state_dir, map_name)
    agent = make_agent(agent_name, config["agent"])
    click.echo(f"🔎 Fuzzing {agent.name} on {map_name} with {cfg.strategy} (budget {budget})")
    report = run_campaign(cfg, seeds, agent, scene, state_dir, Budget.parse(budget))
    if report.executions:
        write_report(state_dir)
    click.echo(f"✅ {report.executions} executions, {len(report.errors)} error scenarios")
    for kind, count in report.by_kind.items():
        if count:
            click.echo(f"   {kind}: {count}")
    if report.faults or report.skipped:
        click.echo(f"   agent faults: {report.faults}, spawn clashes skipped: {report.skipped}")
    if report.aborted:
        click.echo("⚠️ Campaign stopped early: the agent kept faulting", err=True)
    return EXIT_ERRORS_FOUND if report.errors else EXIT_OK


# ---------------------------------------------------------------- sem


@main.group()
def sem():
    """Scenario Evaluation Model commands."""


def _seeds_for(state_dir: Path, entries):
    seeds = {}
    for map_name in sorted({e.record.scenario.seed_id.rsplit("-", 1)[0] for e in entries}):
        seeds.update({s.seed_id: s for s in load_corpus(corpus_path(state_dir, map_name)).seeds})
    return seeds


@sem.command(name="train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--epochs", type=int, default=None, help="Override sem.epochs")
@click.pass_context
def sem_train(ctx, config_path, epochs):
    """Train a SEM snapshot on every record in the state directory."""
    state_dir = ctx.obj["state_dir"]
    config = load_config(config_path)
    sem_cfg = dict(config["sem"])
    sem_cfg["seed"] = ctx.obj["rng_seed"] if ctx.obj["rng_seed"] is not None else config["campaign"]["rng_seed"]
    state = CampaignState.load(state_dir)
    if not state.entries:
        raise InsufficientData(f"{state_dir / RECORDS_FILE} holds no records")
    model, metrics = train(build_model(SemConfig(**sem_cfg)), state.records, _seeds_for(state_dir, state.entries), epochs)
    path = save_checkpoint(model, state_dir / SEM_DIR / f"{len(state.entries)}.ckpt", len(state.entries))
    append_event(state.campaign_path, "sem.train", {"path": str(path), "records": len(state.entries)})
    click.echo(f"✅ SEM trained on {len(state.entries)} records -> {path}")
    click.echo(json.dumps({k: v for k, v in metrics.as_dict().items() if k != "train_loss"}, sort_keys=True, indent=1))
    return EXIT_OK


@sem.command(name="eval")
@click.option("--records", "records_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.pass_context
def sem_eval(ctx, records_path, checkpoint):
    """Score a records file with a SEM checkpoint (default: the newest in the state directory)."""
    state_dir = ctx.obj["state_dir"]
    checkpoint = checkpoint or latest_checkpoint(state_dir / SEM_DIR)
    if checkpoint is None:
        raise ConfigError(f"no SEM checkpoint in {state_dir / SEM_DIR}; run `scenariofuzz sem train` first")
    model, trained_on = load_checkpoint(checkpoint)
    with open(records_path, encoding="utf-8") as f:
        entries = [RecordEntry.from_dict(json.loads(line)) for line in f if line.strip()]
    metrics = evaluate_metrics(model, [e.record for e in entries], _seeds_for(state_dir, entries))
    click.echo(f"🔎 {checkpoint.name} (trained on {trained_on}) on {len(entries)} records")
    click.echo(json.dumps({k: v for k, v in metrics.as_dict().items() if k != "train_loss"}, sort_keys=True, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------- analysis


@main.command()
@click.option("--id", "error_id", required=True, help="Error scenario id, e.g. e00003")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def replay(ctx, error_id, config_path):
    """Re-run a stored error scenario and check it is bit-identical."""
    config = load_config(config_path)
    report = replay_error(error_id, ctx.obj["state_dir"], config["agent"])
    if report.version_mismatch:
        click.echo("⚠️ Agent version differs from the one that recorded this scenario")
    if report.passed:
        click.echo(f"✅ {error_id}: PASS ({report.frames_compared} frames, deviation {report.max_deviation:g} m)")
        return EXIT_OK
    click.echo(
        f"❌ {error_id}: FAIL (first divergence at tick {report.first_divergence}, "
        f"max deviation {report.max_deviation:g} m, outcome match: {report.outcome_match})"
    )
    return EXIT_FAULT


@main.group()
def analyze():
    """Error scenario analysis commands."""


@analyze.command(name="cluster")
@click.option("--system", default=None, help="Only cluster errors of this agent")
@click.option("--k", type=int, default=None, help="Number of clusters (default: best silhouette)")
@click.pass_context
def analyze_cluster(ctx, system, k):
    """Cluster collision scenarios by shared trajectories and SEM features."""
    seed = ctx.obj["rng_seed"] or 0
    result = analyze_errors(ctx.obj["state_dir"], system=system, k=k, seed=seed)
    click.echo(f"✅ {result.k} clusters" + (f" (silhouette {result.silhouette:.3f})" if result.silhouette is not None else ""))
    for c in result.clusters:
        click.echo(f"   #{c.label}: {len(c.members)} scenarios, medoid {c.medoid}")
    return EXIT_OK


@main.command()
@click.pass_context
def report(ctx):
    """Write report.md and report.json for the campaign in the state directory."""
    json_path, md_path = write_report(ctx.obj["state_dir"])
    click.echo(f"✅ Report written to {md_path} and {json_path}")
    return EXIT_OK


# ---------------------------------------------------------------- entry points


def dispatch(argv=None) -> int:
    """Run the CLI and map the outcome to an exit code instead of raising."""
    try:
        rv = main.main(args=argv, prog_name="scenariofuzz", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except Exception as e:
        if not isinstance(e, ScenarioFuzzError):
            logger.exception("Unexpected failure")
        else:
            logger.debug("Command failed", exc_info=True)
        report = on_exception_hints(e)
        click.echo(f"❌ {report.error}: {report.message}", err=True)
        for h in report.hints:
            click.echo(f"💡 {h}", err=True)
        click.echo(json.dumps(report.as_dict()), err=True)
        return EXIT_FAULT
    return rv if isinstance(rv, int) else EXIT_OK


def entrypoint() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
