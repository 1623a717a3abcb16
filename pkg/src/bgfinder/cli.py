"""Command-line entry point: ``bgfinder <group> <command>``.

Options resolve as defaults < ``--config`` YAML < command-line flags; any flag can also be
set through a ``BGFINDER_...`` environment variable. Each run writes ``config.yaml`` next to its outputs.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import click
import yaml

from . import __version__
from .catalog import CatalogError, KnowledgeBase, cp_closure_problems, kb_save, load_catalog
from .decays import SPLITS, DecayParseError, format_decay, load_signals, parse_decay
from .environment import Environment
from .ga import GAConfig, GenerationStats, run_evolutions, save_hall_of_fame, write_stats
from .mcts import SearchParams
from .model import ModelConfig, PolicyValueNet, count_parameters, hand_count, load_checkpoint
from .oracle import all_catalog_trees, enumerate_backgrounds, ga_space_size, save_ground_truth
from .rewards import RewardParams

TINY_MODEL = {"d_model": 32, "n_heads": 2, "enc_layers": 1, "dec_layers": 1, "d_ff": 64}


@dataclass
class RunConfig:
    db: str | None = None
    signals: str | None = None
    seed: int = 0
    workers: int = 1
    reward: dict = field(default_factory=dict)
    ga: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise click.BadParameter(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def reward_params(self) -> RewardParams:
        return RewardParams(**self.reward)

    def ga_config(self) -> GAConfig:
        return GAConfig(**{**self.ga, "seed": self.seed, "workers": self.workers})

    def model_config(self, env: Environment) -> ModelConfig:
        return ModelConfig.for_env(env, **{**self.model, "seed": self.seed})

    def train_config(self):
        from .training import TrainConfig

        d = dict(self.train)
        if isinstance(d.get("search"), dict):
            d["search"] = SearchParams(**d["search"])
        return TrainConfig(**{**d, "seed": self.seed, "workers": self.workers})

    def eval_config(self):
        from .evaluation import EvalConfig

        return EvalConfig(**{**self.eval, "seed": self.seed})

    def save(self, out: Path, **resolved) -> None:
        out.mkdir(parents=True, exist_ok=True)
        blob = asdict(self)
        blob.update({k: _plain(v) for k, v in resolved.items()})
        (out / "config.yaml").write_text(yaml.safe_dump(blob, sort_keys=True), encoding="utf-8")


def _plain(v):
    if hasattr(v, "__dataclass_fields__"):
        return asdict(v)
    return v


class Ctx:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._catalog = None
        self._signals = None

    @property
    def catalog(self):
        if self._catalog is None:
            self._catalog = load_catalog(self.cfg.db)
        return self._catalog

    @property
    def signals(self):
        if self._signals is None:
            self._signals = load_signals(self.catalog, self.cfg.signals)
        return self._signals

    def env(self) -> Environment:
        return Environment(self.catalog, self.cfg.reward_params())

    def pick(self, split: str, signal: tuple[str, ...] = ()) -> list:
        if signal:
            return [parse_decay(s, self.catalog) for s in signal]
        if split == "all":
            return self.signals["train"] + self.signals["gen"]
        return self.signals[split]


def _merge(section: dict, **kw) -> None:
    section.update({k: v for k, v in kw.items() if v is not None})


@click.group(context_settings={"auto_envvar_prefix": "BGFINDER", "help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML run configuration.")
@click.option("--db", type=click.Path(exists=True, dir_okay=False), help="Particle/decay DB (default: shipped toy DB).")
@click.option("--signals", type=click.Path(exists=True, dir_okay=False), help="Signals file (default: shipped list).")
@click.option("--seed", type=int, help="Global seed.")
@click.option("--workers", type=int, help="Worker processes.")
@click.option("-v", "--verbose", is_flag=True)
@click.version_option(__version__)
@click.pass_context
def main(ctx, config_path, db, signals, seed, workers, verbose):
    """Background determination toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    cfg = RunConfig.load(config_path)
    for k, v in (("db", db), ("signals", signals), ("seed", seed), ("workers", workers)):
        if v is not None:
            setattr(cfg, k, v)
    ctx.obj = Ctx(cfg)


# --- db --------------------------------------------------------------------

@main.group()
def db():
    """Particle and decay catalog."""


@db.command("validate")
@click.pass_obj
def db_validate(obj: Ctx):
    try:
        c = obj.catalog
    except CatalogError as exc:
        raise click.ClickException(str(exc))
    problems = cp_closure_problems(c)
    roles = {r: len(c.by_role(r)) for r in ("mother", "intermediate", "detectable", "neutrino")}
    n_ch = sum(1 for _ in c.iter_channels())
    click.echo(f"{len(c.particles)} particles ({', '.join(f'{n} {r}' for r, n in roles.items())}), {n_ch} channels")
    if problems:
        for p in problems:
            click.echo(p, err=True)
        raise click.ClickException(f"{len(problems)} CP closure problems")
    click.echo("CP closure ok")


# --- oracle ----------------------------------------------------------------

@main.group()
def oracle():
    """Exhaustive ground truth."""


@oracle.command("enumerate")
@click.option("--signal", "signal", multiple=True, help="Decay string; repeatable. Default: every shipped signal.")
@click.option("--out", type=click.Path(file_okay=False), default="runs/oracle", show_default=True)
@click.pass_obj
def oracle_enumerate(obj: Ctx, signal, out):
    """Write one ground-truth JSON per signal."""
    c = obj.catalog
    p = obj.cfg.reward_params()
    sigs = obj.pick("all", signal)
    trees = all_catalog_trees(c)
    outd = Path(out)
    obj.cfg.save(outd)
    for k, sig in enumerate(sigs, 1):
        gt = enumerate_backgrounds(sig, c, p, trees=trees)
        path = outd / f"signal_{k:02d}.json"
        save_ground_truth(gt, c, path)
        click.echo(f"{len(gt):3d}  {format_decay(sig, c)}  -> {path}")


@oracle.command("space-size")
@click.option("--profile", default="2,1,2", show_default=True, help="Positive,negative,neutral final-state counts.")
@click.pass_obj
def oracle_space_size(obj: Ctx, profile):
    try:
        prof = tuple(int(x) for x in profile.split(","))
        assert len(prof) == 3
    except (ValueError, AssertionError):
        raise click.BadParameter("profile must read 'n_pos,n_neg,n_neutral'")
    click.echo(ga_space_size(prof, obj.catalog))


# --- ga --------------------------------------------------------------------

@main.group()
def ga():
    """Genetic search for backgrounds."""


@ga.command("run")
@click.option("--signal", "signal", multiple=True)
@click.option("--split", type=click.Choice(("train", "gen", "all")), default="train", show_default=True)
@click.option("--population", type=int)
@click.option("--generations", type=int)
@click.option("--out", type=click.Path(file_okay=False), default="runs/ga", show_default=True)
@click.option("--score/--no-score", default=True, help="Compare the hall of fame with the oracle.")
@click.pass_obj
def ga_run(obj: Ctx, signal, split, population, generations, out, score):
    """Writes hall_of_fame.json, ga_stats.csv, kb.json and ga_progress.png."""
    from .report import plot_ga_stats

    _merge(obj.cfg.ga, population_size=population, generations=generations)
    c, p, gcfg = obj.catalog, obj.cfg.reward_params(), obj.cfg.ga_config()
    outd = Path(out)
    obj.cfg.save(outd, resolved_ga=gcfg)
    kb = KnowledgeBase.seeded(c, gcfg.kb_seed_fraction)
    stats: list[GenerationStats] = []
    rows = []
    trees = all_catalog_trees(c) if score else None
    for sig in obj.pick(split, signal):
        hof = run_evolutions(sig, c, gcfg, p, kb, stats)
        rows.extend(hof.rows(sig, c))
        line = f"{len(hof):3d} found  {format_decay(sig, c)}"
        if score:
            gt = enumerate_backgrounds(sig, c, p, trees=trees)
            line = f"{len(set(hof.entries) & gt.keys()):3d}/{len(gt):<3d} {format_decay(sig, c)}"
        click.echo(line)
    save_hall_of_fame(rows, outd / "hall_of_fame.json")
    write_stats(stats, outd / "ga_stats.csv")
    kb_save(kb, outd / "kb.json")
    plot_ga_stats(outd / "ga_stats.csv", outd / "ga_progress.png")


# --- training --------------------------------------------------------------

def _model_overrides(cfg: RunConfig, size: str | None) -> None:
    if size == "tiny":
        cfg.model = {**TINY_MODEL, **cfg.model}


@main.command("train")
@click.option("--method", type=click.Choice(("pgsu", "peg")))
@click.option("--experts", type=click.Path(exists=True, dir_okay=False), help="Hall-of-fame JSON used as demonstrations.")
@click.option("--epochs", type=int)
@click.option("--episodes", type=int, help="Episodes per epoch.")
@click.option("--simulations", type=int, help="Searches per move.")
@click.option("--model-size", type=click.Choice(("default", "tiny")))
@click.option("--split", type=click.Choice(("train", "all")), default="train", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="runs/train", show_default=True)
@click.pass_obj
def train_cmd(obj: Ctx, method, experts, epochs, episodes, simulations, model_size, split, out):
    """Self-play training; writes metrics.csv, timing.csv, discovered.json, checkpoint.pt."""
    from .report import plot_metrics
    from .training import ExpertSet, train

    cfg = obj.cfg
    _merge(cfg.train, method=method, epochs=epochs, episodes_per_epoch=episodes)
    if simulations is not None:
        cfg.train["search"] = {**cfg.train.get("search", {}), "simulations": simulations}
    _model_overrides(cfg, model_size)
    env = obj.env()
    signals = obj.pick(split)
    tcfg, mcfg = cfg.train_config(), cfg.model_config(env)
    ex = ExpertSet.from_hall_of_fame(env, signals, experts) if experts else None
    outd = Path(out)
    cfg.save(outd, resolved_train=tcfg, resolved_model=mcfg)
    res = train(env, signals, tcfg, model_cfg=mcfg, experts=ex, gen_signals=obj.signals["gen"] if tcfg.gen_eval_episodes else (), out_dir=outd)
    plot_metrics(outd / "metrics.csv", outd / "training_curves.png")
    last = res.metrics[-1] if res.metrics else {}
    click.echo(f"epochs {len(res.metrics)}, training recall {last.get('train_recall', 0)}/{last.get('train_oracle', 0)}")


@main.command("finetune")
@click.option("--mode", type=click.Choice(("pgsu-all", "peg-all")), required=True)
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True, help="Directory of a finished training run.")
@click.option("--epochs", type=int, default=20, show_default=True)
@click.option("--episodes", type=int, default=80, show_default=True)
@click.option("--simulations", type=int)
@click.option("--experts", type=click.Path(exists=True, dir_okay=False), help="Hall-of-fame JSON merged into the demonstrations.")
@click.option("--split", type=click.Choice(("train", "all")), default="train", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="runs/finetune", show_default=True)
@click.pass_obj
def finetune_cmd(obj: Ctx, mode, run_dir, epochs, episodes, simulations, experts, split, out):
    """Specialise a trained agent on every background it discovered."""
    from .report import plot_metrics
    from .training import DiscoveredSet, ExpertSet, NoDemonstrations, fine_tune, fine_tune_config

    cfg = obj.cfg
    if simulations is not None:
        cfg.train["search"] = {**cfg.train.get("search", {}), "simulations": simulations}
    env = obj.env()
    run = Path(run_dir)
    model, _, _ = load_checkpoint(run / "checkpoint.pt")
    disc = DiscoveredSet.from_json(json.loads((run / "discovered.json").read_text(encoding="utf-8")), env)
    tcfg = fine_tune_config(cfg.train_config(), mode.replace("-", "_"), epochs, episodes)
    outd = Path(out)
    cfg.save(outd, resolved_train=tcfg, mode=mode, source=str(run))
    try:
        sigs = obj.pick(split)
        ex = ExpertSet.from_hall_of_fame(env, sigs, experts) if experts else None
        res = fine_tune(env, model, sigs, disc, mode.replace("-", "_"), tcfg, out_dir=outd, experts=ex)
    except NoDemonstrations as exc:
        raise click.ClickException(str(exc))
    plot_metrics(outd / "metrics.csv", outd / "training_curves.png")
    click.echo(f"fine-tuned {len(res.metrics)} epochs on {len(disc)} discovered backgrounds")


# --- evaluation ------------------------------------------------------------

@main.command("eval")
@click.option("--split", type=click.Choice(SPLITS), default="train", show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--episodes", type=int, help="Total sampling budget for the split.")
@click.option("--temperature", type=float)
@click.option("--out", type=click.Path(file_okay=False), default="runs/eval", show_default=True)
@click.pass_obj
def eval_cmd(obj: Ctx, split, checkpoint, episodes, temperature, out):
    """Sample backgrounds from the policy; writes recall.json, appends recall.csv, renders recall.png."""
    from .evaluation import budgets, determine_backgrounds, score
    from .report import plot_recall

    cfg = obj.cfg
    _merge(cfg.eval, episodes=episodes, temperature=temperature)
    ecfg = cfg.eval_config()
    env = obj.env()
    model, _, _ = load_checkpoint(checkpoint)
    sigs = obj.pick(split)
    trees = all_catalog_trees(obj.catalog)
    found, gts = {}, {}
    for k, (sig, n) in enumerate(zip(sigs, budgets(ecfg.episodes, len(sigs)))):
        key = env.signal_info(sig).key
        found[key] = determine_backgrounds(model, env, sig, n, ecfg.temperature, ecfg.seed, ecfg.batch, k)
        gts[key] = enumerate_backgrounds(sig, obj.catalog, env.params, trees=trees)
    report = score(found, gts, env, split)
    outd = Path(out)
    cfg.save(outd, resolved_eval=ecfg, checkpoint=str(checkpoint))
    report.save(outd / "recall.json")
    report.append_csv(outd / "recall.csv", Path(checkpoint).parent.name)
    plot_recall(outd / "recall.json", outd / "recall.png")
    f, o = report.totals()[split]
    click.echo(f"{split}: {f}/{o} relevant backgrounds found")


@main.group()
def embed():
    """Backbone embeddings."""


@embed.command("export")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", type=click.Choice(("train", "gen", "all")), default="all", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default="runs/embeddings.csv", show_default=True)
@click.option("--raw", is_flag=True, help="Skip L2 normalisation.")
@click.pass_obj
def embed_export(obj: Ctx, checkpoint, split, out, raw):
    """One row per oracle (signal, background) pair."""
    from .evaluation import export_embeddings

    env = obj.env()
    model, _, _ = load_checkpoint(checkpoint)
    trees = all_catalog_trees(obj.catalog)
    pairs = []
    for sig in obj.pick(split):
        pairs += [(sig, e.tree) for e in enumerate_backgrounds(sig, obj.catalog, env.params, trees=trees).entries]
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    n = export_embeddings(model, env, pairs, out, normalise=not raw)
    click.echo(f"{n} rows -> {out}")


# --- report ----------------------------------------------------------------

@main.group()
def report():
    """Summaries and figures."""


@report.command("params")
@click.option("--model-size", type=click.Choice(("default", "tiny")), default="default", show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def report_params(obj: Ctx, model_size, checkpoint):
    """Print the exact parameter count."""
    if checkpoint:
        model = load_checkpoint(checkpoint)[0]
    else:
        _model_overrides(obj.cfg, model_size)
        model = PolicyValueNet(obj.cfg.model_config(obj.env()))
    n = count_parameters(model)
    assert n == hand_count(model.cfg)
    click.echo(n)


@report.command("figures")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
def report_figures(run_dir):
    """Re-render figures for a run directory."""
    from .report import render_dir

    for p in render_dir(run_dir):
        click.echo(p)


def run() -> None:
    try:
        main(standalone_mode=True)
    except (CatalogError, DecayParseError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    run()
