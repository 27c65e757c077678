"""Command-line entry point: ``python -m app <command>``."""

import logging
from pathlib import Path
from typing import Optional, Tuple

import click

from app.core.config import Settings, load_settings
from app.core.errors import FormantDiffError
from app.core.logging import configure_logging
from app.models.schemas import Solver, SplitName
from app.services.evaluation import evaluate, sweep_cer_ratio, write_report
from app.services.synthesis import synthesize_to_files
from app.services.toy_corpus import MANIFEST_FILE, generate_corpus, read_manifest
from app.services.training import checkpoint_alphabet, fit, load_checkpoint, model_from_checkpoint
from app.utils.audio_io import read_wav
from app.utils.run_manifest import write_run_manifest

logger = logging.getLogger(__name__)

SOLVER_CHOICE = click.Choice([s.value for s in Solver])
SPLIT_CHOICE = click.Choice([s.value for s in SplitName])


def _settings(ctx: click.Context) -> Settings:
    return ctx.obj["settings"]


def _run(fn, *args, **kwargs):
    # domain errors become a one-line diagnostic and exit status 1
    try:
        return fn(*args, **kwargs)
    except FileNotFoundError as exc:
        raise click.ClickException(f"file not found: {exc}") from exc
    except (FormantDiffError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
@click.option("--config", "config_file", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="KEY=VALUE file overriding the defaults (same syntax as .env).")
@click.option("--log-level", default=None, help="Logging level, e.g. INFO or DEBUG.")
@click.pass_context
def cli(ctx: click.Context, config_file: Optional[Path], log_level: Optional[str]):
    """Desk-scale source-filter diffusion TTS toolkit."""
    if config_file is not None and not config_file.is_file():
        raise click.BadParameter(f"config file '{config_file}' does not exist", param_hint="--config")
    cfg = load_settings(config_file)
    configure_logging(log_level or cfg.log_level)
    ctx.ensure_object(dict)
    ctx.obj["settings"] = cfg
    ctx.obj["config_file"] = config_file


@cli.command("gen-corpus")
@click.option("--alphabet", "alphabet_size", type=int, default=8, show_default=True)
@click.option("--utterances", "n_utterances", type=int, default=16, show_default=True)
@click.option("--speakers", "n_speakers", type=int, default=4, show_default=True)
@click.option("--heldout-speakers", "n_heldout", type=int, default=0, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output directory; defaults to the configured data root.")
@click.pass_context
def gen_corpus(ctx, alphabet_size, n_utterances, n_speakers, n_heldout, seed, out_dir):
    """Synthesize a toy corpus with exact ground truth."""
    cfg = _settings(ctx)
    out_dir = out_dir or cfg.data_root
    manifest = _run(generate_corpus, alphabet_size, n_utterances, n_speakers, seed, out_dir,
                    n_heldout_speakers=n_heldout)
    outputs = [out_dir / MANIFEST_FILE] + [manifest.audio_file(e) for e in manifest.entries]
    write_run_manifest(out_dir, "gen-corpus", cfg, seed=seed, outputs=outputs, arguments={
        "alphabet": alphabet_size, "utterances": n_utterances, "speakers": n_speakers,
        "heldout_speakers": n_heldout, "out": out_dir,
    })
    click.echo(f"Wrote {len(manifest.entries)} utterances to {out_dir}")


@cli.command()
@click.option("--corpus", "corpus_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--steps", "max_steps", type=int, default=None, help="Overrides train.max_steps.")
@click.option("--batch-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--no-ef-generators", is_flag=True, help="Single generator feeding the diffusion model.")
@click.option("--no-energy", is_flag=True, help="Drop the energy predictor and embedding.")
@click.option("--resume", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.pass_context
def train(ctx, corpus_dir, out_dir, max_steps, batch_size, seed, no_ef_generators, no_energy, resume):
    """Train the acoustic model on the corpus train split."""
    cfg = _settings(ctx)
    update = {k: v for k, v in {"max_steps": max_steps, "batch_size": batch_size, "seed": seed}.items()
              if v is not None}
    if no_ef_generators:
        update["no_ef_generators"] = True
    if no_energy:
        update["no_energy"] = True
    train_cfg = cfg.train.model_copy(update=update)
    cfg = cfg.model_copy(update={"train": train_cfg})

    manifest = _run(read_manifest, corpus_dir)
    result = _run(fit, manifest, train_cfg, cfg.model, cfg.diffusion, out_dir=out_dir, resume=resume)
    write_run_manifest(out_dir, "train", cfg, seed=train_cfg.seed, ckpt=result.checkpoint,
                       outputs=[result.checkpoint, out_dir / "train_log.jsonl"],
                       arguments={"corpus": corpus_dir, "resume": resume})
    click.echo(f"Trained {result.step} steps; checkpoint {result.checkpoint}")


@cli.command()
@click.option("--ckpt", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--text", required=True, help="Space-separated phoneme symbols, e.g. 'a b c'.")
@click.option("--ref", "ref_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--solver", type=SOLVER_CHOICE, default="pf", show_default=True)
@click.option("--steps", type=int, default=10, show_default=True)
@click.option("--tau", type=float, default=1.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--dump-intermediates", is_flag=True, help="Also write X'_E and X_F containers.")
@click.pass_context
def synth(ctx, ckpt, text, ref_path, solver, steps, tau, seed, out, dump_intermediates):
    """Synthesize one mel container from text and a reference recording."""
    cfg = _settings(ctx)
    payload = _run(load_checkpoint, ckpt)
    model, alphabet = model_from_checkpoint(payload), checkpoint_alphabet(payload)
    reference = _run(read_wav, ref_path)
    _, files = _run(synthesize_to_files, model, alphabet, text, reference, out, Solver(solver), steps, tau, seed,
                    dump_intermediates=dump_intermediates, diffusion=cfg.diffusion)
    write_run_manifest(out.parent, "synth", cfg, seed=seed, ckpt=ckpt, outputs=files, arguments={
        "text": text, "ref": ref_path, "solver": solver, "steps": steps, "tau": tau,
    })
    click.echo(f"Wrote {out}")


def _sweep_spec(cfg: Settings, solvers: Tuple[str, ...], steps: Tuple[int, ...], tau: Optional[float],
                seeds: Tuple[int, ...], predicted_durations: bool):
    update = {}
    if solvers:
        update["solvers"] = list(solvers)
    if steps:
        update["step_counts"] = list(steps)
    if tau is not None:
        update["tau"] = tau
    if seeds:
        update["seeds"] = list(seeds)
    if predicted_durations:
        update["use_reference_durations"] = False
    return cfg.sweep.model_copy(update=update)


def _eval_options(fn):
    options = [
        click.option("--ckpt", type=click.Path(dir_okay=False, path_type=Path), required=True),
        click.option("--corpus", "corpus_dir", type=click.Path(file_okay=False, path_type=Path), required=True),
        click.option("--split", type=SPLIT_CHOICE, default="heldout", show_default=True),
        click.option("--solver", "solvers", type=SOLVER_CHOICE, multiple=True),
        click.option("--steps", type=int, multiple=True),
        click.option("--tau", type=float, default=None),
        click.option("--seed", "seeds", type=int, multiple=True),
        click.option("--max-utterances", type=int, default=None),
        click.option("--predicted-durations", is_flag=True, help="Length-regulate with predicted durations."),
        click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


@cli.command("eval")
@_eval_options
@click.pass_context
def eval_cmd(ctx, ckpt, corpus_dir, split, solvers, steps, tau, seeds, max_utterances, predicted_durations, out_dir):
    """Per-utterance proxy CER, mel L2 and pitch RMSE with 95% intervals."""
    cfg = _settings(ctx)
    spec = _sweep_spec(cfg, solvers, steps, tau, seeds, predicted_durations)
    report = _run(evaluate, ckpt, corpus_dir, SplitName(split), spec, max_utterances)
    files = write_report(report, out_dir)
    write_run_manifest(out_dir, "eval", cfg, seed=spec.seeds[0], ckpt=ckpt, outputs=files,
                       arguments={"corpus": corpus_dir, "split": split, "sweep": spec.model_dump(mode="json")})
    for agg in report.aggregates:
        click.echo(f"{agg.solver.value}\t{agg.steps}\tCER {agg.cer_mean:.4f} +/- {agg.cer_ci95:.4f}")


@cli.command()
@_eval_options
@click.pass_context
def sweep(ctx, ckpt, corpus_dir, split, solvers, steps, tau, seeds, max_utterances, predicted_durations, out_dir):
    """CER ratio against reverse steps for every solver, as a table and a plot."""
    cfg = _settings(ctx)
    spec = _sweep_spec(cfg, solvers, steps, tau, seeds, predicted_durations)
    rows, files = _run(sweep_cer_ratio, ckpt, corpus_dir, SplitName(split), spec, out_dir, max_utterances)
    write_run_manifest(out_dir, "sweep", cfg, seed=spec.seeds[0], ckpt=ckpt, outputs=files,
                       arguments={"corpus": corpus_dir, "split": split, "sweep": spec.model_dump(mode="json")})
    for row in rows:
        ratio = f"{row.cer_ratio:.4f}" if row.ratio_defined else "undefined"
        click.echo(f"{row.solver.value}\t{row.steps}\tCER {row.cer:.4f}\tratio {ratio}")


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("app.main:app", host=host, port=port)


def main():
    cli(obj={})


if __name__ == "__main__":
    main()
