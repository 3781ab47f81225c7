"""Command-line entry points for data generation, training, sampling,
test-time scaling, evaluation, experiments, and the gradient suite."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import tensor as T
from . import datagen
from . import flow
from . import rae
from .conditioning import ConditionProbe, tts_experiment
from .config import ExperimentConfig
from .experiments import REGISTRY, run_experiment
from .report import ExperimentReport
from .train import (CHECKPOINT_NAME, acquire_lock, eval_checkpoint, gradcheck,
                    load_model, mixture_from_config, save_run,
                    schedule_from_config, train_dit)


def _load_config(path: str | None, seed: int | None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    if seed is not None:
        cfg = cfg.with_overrides(seed=seed)
    return cfg


@click.group()
def main():
    """Desk-scale latent diffusion toolkit."""


@main.command("gen-data")
@click.option("--kind", type=click.Choice(["latents", "images"]), required=True)
@click.option("--spec", "spec_path", type=click.Path(), default=None,
              help="Config file describing the data task.")
@click.option("--count", type=int, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
def gen_data(kind, spec_path, count, seed, out):
    """Write synthetic latents or images in the checkpoint tensor format."""
    cfg = _load_config(spec_path, seed)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if kind == "latents":
        spec = mixture_from_config(cfg)
        per = count // spec.num_conditions
        arrays = {f"latents/cond{c}": datagen.sample_latents(
            spec, c, per, T.derive_seed(seed, "gen-data", c))
            for c in range(spec.num_conditions)}
    else:
        mix = datagen.DomainMix(cfg["data.mix.smooth"], cfg["data.mix.texture"],
                                cfg["data.mix.glyph"])
        arrays = {"images": datagen.render_mixture_batch(mix, count, seed)}
    T.save_checkpoint(out, arrays)
    sidecar = {"kind": kind, "count": count, "seed": seed,
               "config_hash": cfg.hash()}
    Path(str(out) + ".json").write_text(json.dumps(sidecar, sort_keys=True))
    click.echo(f"wrote {out}")


@main.command("train-dit")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
def train_dit_cmd(config_path, seed, out):
    """Flow-matching training of the denoiser on the configured task."""
    cfg = _load_config(config_path, seed)
    lock = acquire_lock(Path(out))
    try:
        _, _, report = train_dit(cfg, out_dir=out)
        report.render_figure(Path(out) / "training.png",
                             ["fm_loss", "sliced_wasserstein"], logy=True)
        click.echo(f"final sliced_wasserstein: {report.last('sliced_wasserstein'):.4f}")
    finally:
        lock.unlink()


@main.command("train-decoder")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=6)
def train_decoder_cmd(config_path, seed, out, epochs):
    """Train the token decoder under the composite reconstruction loss."""
    cfg = _load_config(config_path, seed)
    out = Path(out)
    lock = acquire_lock(out)
    try:
        encoder = rae.FrozenEncoder(patch=cfg["rae.patch"],
                                    token_dim=cfg["rae.token_dim"],
                                    seed=cfg["rae.encoder_seed"])
        decoder = rae.Decoder(encoder.shape, patch=cfg["rae.patch"],
                              hidden=cfg["decoder.hidden"],
                              depth=cfg["decoder.depth"],
                              seed=T.derive_seed(cfg["seed"], "decoder"))
        mix = datagen.DomainMix(cfg["data.mix.smooth"], cfg["data.mix.texture"],
                                cfg["data.mix.glyph"])
        weights = rae.LossWeights(cfg["loss.omega_l"], cfg["loss.omega_g"],
                                  cfg["loss.omega_a"])
        noise_cfg = rae.NoiseAugConfig(cfg["noise_aug.tau"],
                                       cfg["noise_aug.enabled"])
        report = rae.train_decoder(
            encoder, decoder, mix, weights, noise_cfg, epochs=epochs,
            seed=cfg["seed"], config_hash=cfg.hash(),
            batch_size=cfg["decoder.batch_size"], lr=cfg["decoder.lr"],
            adv_start_epoch=cfg["decoder.adv_start_epoch"])
        save_run(out, cfg, report, extra_arrays=decoder.state_arrays())
        report.render_figure(out / "val_l1.png",
                             [f"val_l1_{d}" for d in datagen.DOMAINS])
        click.echo(f"final combined val l1: {report.last('val_l1_combined'):.4f}")
    finally:
        lock.unlink()


@main.command("sample")
@click.option("--steps", type=int, default=50)
@click.option("--batch", type=int, default=16)
@click.option("--seed", type=int, default=0)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), required=True)
def sample_cmd(steps, batch, seed, checkpoint, config_path, out):
    """Euler-sample latents from a trained checkpoint."""
    cfg = _load_config(config_path, seed)
    model, conditioner = load_model(cfg, checkpoint)
    sched = schedule_from_config(cfg)
    n_cond = cfg["data.num_conditions"]
    cond_ids = np.arange(batch) % n_cond
    latents = flow.euler_sample(
        model, sched, steps,
        (batch, cfg["latent.num_tokens"], cfg["latent.token_dim"]),
        seed, cond=conditioner(cond_ids).data)
    T.save_checkpoint(out, {"latents": latents,
                            "cond_ids": cond_ids.astype(np.float64)})
    click.echo(f"wrote {out}")


@main.command("tts")
@click.option("--k", type=int, default=4)
@click.option("--n", "n_grid", default="8,16,32", help="Comma-separated n values.")
@click.option("--verifier", type=click.Choice(["oracle", "confidence"]),
              default="oracle")
@click.option("--trials", type=int, default=20)
@click.option("--seed", type=int, default=0)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), required=True)
def tts_cmd(k, n_grid, verifier, trials, seed, checkpoint, config_path, out):
    """Best-k-of-n latent test-time scaling sweep."""
    cfg = _load_config(config_path, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model, conditioner = load_model(cfg, checkpoint)
    spec = mixture_from_config(cfg)
    sched = schedule_from_config(cfg)
    probe = None
    if verifier == "confidence":
        probe = ConditionProbe(spec.token_dim, spec.num_conditions,
                               seed=T.derive_seed(seed, "probe"))
        acc = probe.fit(spec, seed=T.derive_seed(seed, "probe-fit"))
        click.echo(f"probe accuracy: {acc:.3f}")
    grid = [int(x) for x in n_grid.split(",")]
    report = tts_experiment(model, conditioner, sched, spec, verifier, k,
                            grid, trials, seed, probe=probe,
                            config_hash=cfg.hash())
    report.write_jsonl(out / "metrics.jsonl")
    for n in grid:
        vals = [v for _, v in report.values(f"selected_oracle_mean_n{n}")]
        click.echo(f"n={n}: mean selected oracle score {np.mean(vals):.3f}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--metrics", default="sliced_wasserstein",
              help="Comma-separated metric names.")
@click.option("--seed", type=int, default=1000)
@click.option("--out", type=click.Path(), default=None)
def eval_cmd(checkpoint, config_path, metrics, seed, out):
    """Compute metrics for a checkpoint on freshly generated eval data."""
    cfg = _load_config(config_path, None)
    names = [m for m in metrics.split(",") if m]
    report = eval_checkpoint(cfg, checkpoint, names, seed)
    for r in report.records:
        click.echo(f"{r.name}: {r.value:.6f}")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        report.write_jsonl(Path(out) / "metrics.jsonl")


@main.command("experiment")
@click.argument("name", type=click.Choice(sorted(REGISTRY)))
@click.option("--seed", type=int, default=None,
              help="Defaults to the experiment's registered seed.")
@click.option("--out", type=click.Path(), required=True)
def experiment_cmd(name, seed, out):
    """Run one scripted experiment and write its report + summary."""
    lock = acquire_lock(Path(out))
    try:
        result = run_experiment(name, seed, out)
        click.echo(f"direction_ok: {result['direction_ok']}")
    finally:
        lock.unlink()


@main.command("gradcheck")
@click.option("--scope", type=click.Choice(["ops", "denoiser", "losses", "all"]),
              default="all")
def gradcheck_cmd(scope):
    """Finite-difference gradient verification."""
    scopes = ["ops", "denoiser", "losses"] if scope == "all" else [scope]
    worst = 0.0
    for sc in scopes:
        tol = 1e-4 if sc == "denoiser" else 1e-5
        for name, err in gradcheck(sc).items():
            status = "ok" if err <= tol else "FAIL"
            click.echo(f"{sc}/{name}: max rel err {err:.3e} [{status}]")
            worst = max(worst, err / tol)
    if worst > 1.0:
        raise SystemExit(1)


if __name__ == "__main__":
    main()
