"""Training loops, evaluation, and the finite-difference gradient suite."""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import datagen
from . import flow
from .conditioning import Conditioner, ConditionerConfig
from .config import ExperimentConfig
from .denoiser import Denoiser, DenoiserConfig
from .report import ExperimentReport, PhaseTimer
from .schedule import ShiftedSchedule, sample_train_timesteps

CHECKPOINT_NAME = "checkpoint.raet"


def schedule_from_config(cfg: ExperimentConfig) -> ShiftedSchedule:
    m = cfg["latent.num_tokens"] * cfg["latent.token_dim"]
    if cfg["schedule.shift_enabled"]:
        return ShiftedSchedule(n=cfg["schedule.base_dim"], m=m)
    return ShiftedSchedule.identity()


def denoiser_config(cfg: ExperimentConfig) -> DenoiserConfig:
    head = cfg["denoiser.ddt_head_width"] or None
    return DenoiserConfig(
        hidden=cfg["denoiser.hidden"], depth=cfg["denoiser.depth"],
        heads=cfg["denoiser.heads"], num_tokens=cfg["latent.num_tokens"],
        token_dim=cfg["latent.token_dim"], cond_dim=cfg["denoiser.cond_dim"],
        ddt_head_width=head, ddt_head_depth=cfg["denoiser.ddt_head_depth"])


def mixture_from_config(cfg: ExperimentConfig) -> datagen.MixtureSpec:
    return datagen.default_mixture_spec(
        num_conditions=cfg["data.num_conditions"], components=cfg["data.components"],
        num_tokens=cfg["latent.num_tokens"], token_dim=cfg["latent.token_dim"],
        std=cfg["data.std"], prior_seed=cfg["data.prior_seed"])


def lr_at(step: int, total: int, lr_max: float, warmup_ratio: float,
          cosine: bool) -> float:
    """Linear warmup then cosine decay to a tenth of the peak."""
    warmup = max(1, int(round(warmup_ratio * total)))
    if step < warmup:
        return lr_max * (step + 1) / warmup
    if not cosine:
        return lr_max
    frac = (step - warmup) / max(1, total - warmup)
    lr_min = 0.1 * lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def generation_eval(model: Denoiser, conditioner: Conditioner,
                    sched: ShiftedSchedule, spec: datagen.MixtureSpec,
                    n_samples: int, steps: int, seed: int) -> float:
    """Sliced-Wasserstein between model samples and ground-truth draws,
    pooled over conditions with a balanced condition assignment."""
    n_cond = spec.num_conditions
    per = n_samples // n_cond
    cond_ids = np.repeat(np.arange(n_cond), per)
    cond_vecs = conditioner(cond_ids).data
    shape = (len(cond_ids), spec.num_tokens, spec.token_dim)
    gen = flow.euler_sample(model, sched, steps, shape,
                            T.derive_seed(seed, "eval-noise"), cond=cond_vecs)
    truth = np.concatenate([
        datagen.sample_latents(spec, c, per, T.derive_seed(seed, "eval-truth", c))
        for c in range(n_cond)])
    return datagen.sliced_wasserstein(gen, truth, projections=128,
                                      seed=T.derive_seed(seed, "eval-proj"))


def train_dit(cfg: ExperimentConfig, spec: datagen.MixtureSpec | None = None,
              out_dir: str | Path | None = None,
              eval_hook=None) -> tuple[Denoiser, Conditioner, ExperimentReport]:
    """Flow-matching training of the denoiser + conditioner.

    Deterministic per (config, seed): loss logged every 10 steps,
    sliced-Wasserstein eval every `train.eval_interval` steps.
    """
    seed = cfg["seed"]
    spec = spec or mixture_from_config(cfg)
    sched = schedule_from_config(cfg)
    model = Denoiser(denoiser_config(cfg), T.derive_seed(seed, "denoiser"))
    conditioner = Conditioner(
        ConditionerConfig(num_conditions=spec.num_conditions,
                          cond_dim=cfg["denoiser.cond_dim"]),
        T.derive_seed(seed, "conditioner"))
    params = model.parameters() + conditioner.parameters()
    state = T.OptimizerState(params, lr=cfg["optim.lr"],
                             betas=(cfg["optim.beta1"], cfg["optim.beta2"]),
                             weight_decay=cfg["optim.weight_decay"])
    report = ExperimentReport(config_hash=cfg.hash(), seed=seed)
    total = cfg["train.steps"]
    batch = cfg["train.batch_size"]
    n_cond = spec.num_conditions

    # evaluation and the saved checkpoint use an exponential moving
    # average of the weights; raw weights stay on the optimizer path
    ema_decay = cfg["optim.ema_decay"]
    ema = [p.data.copy() for p in params] if ema_decay > 0 else None

    def swap_ema():
        if ema is not None:
            for p, e in zip(params, ema):
                p.data, e[...] = e.copy(), p.data

    def run_eval(step):
        swap_ema()
        sw = generation_eval(model, conditioner, sched, spec,
                             cfg["train.eval_samples"], cfg["schedule.steps"],
                             T.derive_seed(seed, "eval"))
        swap_ema()
        report.log(step, "sliced_wasserstein", sw)
        if eval_hook is not None:
            eval_hook(step, sw)

    with PhaseTimer(report, "train"):
        run_eval(0)
        for step in range(total):
            g = T.rng(T.derive_seed(seed, "train-cond", step))
            cond_ids = g.integers(0, n_cond, size=batch)
            x = np.concatenate([
                datagen.sample_latents(spec, c, int((cond_ids == c).sum()),
                                       T.derive_seed(seed, "train-data", step, c))
                for c in range(n_cond) if (cond_ids == c).any()])
            labels = np.concatenate([np.full(int((cond_ids == c).sum()), c)
                                     for c in range(n_cond) if (cond_ids == c).any()])
            eps = T.seeded_normal(x.shape, T.derive_seed(seed, "train-eps", step)).data
            t = sample_train_timesteps(sched, len(x),
                                       T.derive_seed(seed, "train-t", step))
            sample = flow.interpolate(x, eps, t)
            cond_vecs = conditioner(labels)
            loss = flow.fm_loss(model, sample, cond_vecs)
            T.zero_grads(params)
            loss.backward()
            T.adamw_step(state, lr=lr_at(step, total, cfg["optim.lr"],
                                         cfg["optim.warmup_ratio"],
                                         cfg["optim.cosine_decay"]))
            if ema is not None:
                for p, e in zip(params, ema):
                    e *= ema_decay
                    e += (1.0 - ema_decay) * p.data
            if (step + 1) % 10 == 0:
                report.log(step + 1, "fm_loss", loss.item())
            if (step + 1) % cfg["train.eval_interval"] == 0:
                run_eval(step + 1)
    if total % cfg["train.eval_interval"] != 0 and total > 0:
        run_eval(total)
    if ema is not None and total > 0:
        for p, e in zip(params, ema):
            p.data = e.copy()

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_run(out_dir, cfg, report, model=model, conditioner=conditioner)
    return model, conditioner, report


def save_run(out_dir: Path, cfg: ExperimentConfig, report: ExperimentReport,
             model: Denoiser | None = None, conditioner: Conditioner | None = None,
             extra_arrays: dict[str, np.ndarray] | None = None,
             summary_lines: list[str] | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.lock")
    report.write_jsonl(out_dir / "metrics.jsonl")
    arrays: dict[str, np.ndarray] = {}
    if model is not None:
        arrays.update(model.state_arrays())
    if conditioner is not None:
        arrays["conditioner/table"] = conditioner.table.data
    if extra_arrays:
        arrays.update(extra_arrays)
    if arrays:
        T.save_checkpoint(out_dir / CHECKPOINT_NAME, arrays)
    if summary_lines:
        report.write_summary(out_dir / "summary.txt", summary_lines)


def load_model(cfg: ExperimentConfig, checkpoint_path) -> tuple[Denoiser, Conditioner]:
    arrays = {k: np.asarray(v, dtype=np.float64)
              for k, v in T.load_checkpoint(checkpoint_path).items()}
    model = Denoiser(denoiser_config(cfg), 0)
    model.load_state(arrays)
    conditioner = Conditioner(
        ConditionerConfig(num_conditions=cfg["data.num_conditions"],
                          cond_dim=cfg["denoiser.cond_dim"]), 0)
    conditioner.table.data = arrays["conditioner/table"].copy()
    return model, conditioner


def eval_checkpoint(cfg: ExperimentConfig, checkpoint_path, metrics: list[str],
                    seed: int) -> ExperimentReport:
    """Compute named metrics on freshly generated eval data."""
    report = ExperimentReport(config_hash=cfg.hash(), seed=seed)
    known = {"sliced_wasserstein", "frechet_feature_distance", "recon_l1"}
    for m in metrics:
        if m not in known:
            raise ValueError(f"unknown metric {m!r}")
    if not metrics:
        return report
    spec = mixture_from_config(cfg)
    sched = schedule_from_config(cfg)
    model, conditioner = load_model(cfg, checkpoint_path)
    n_cond = spec.num_conditions
    per = max(2, cfg["train.eval_samples"] // n_cond)
    cond_ids = np.repeat(np.arange(n_cond), per)
    gen = flow.euler_sample(model, sched, cfg["schedule.steps"],
                            (len(cond_ids), spec.num_tokens, spec.token_dim),
                            T.derive_seed(seed, "eval-noise"),
                            cond=conditioner(cond_ids).data)
    truth = np.concatenate([
        datagen.sample_latents(spec, c, per, T.derive_seed(seed, "eval-truth", c))
        for c in range(n_cond)])
    for m in metrics:
        if m == "sliced_wasserstein":
            val = datagen.sliced_wasserstein(gen, truth, projections=128,
                                             seed=T.derive_seed(seed, "eval-proj"))
        elif m == "frechet_feature_distance":
            from .rae import frechet_feature_distance
            val = frechet_feature_distance(gen, truth)
        else:  # recon_l1 against matched ground truth draws
            val = float(np.abs(gen - truth).mean())
        report.log(0, m, val)
    return report


# ----------------------------------------------------------------------
# finite-difference gradient suite


def finite_diff_check(make_loss, params: list[Tensor], h: float = 1e-5,
                      max_coords: int = 120, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    Coordinates are subsampled for large parameter sets; the error is
    normalized by the largest finite-difference magnitude seen.
    """
    loss = make_loss()
    T.zero_grads(params)
    loss.backward()
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
             for p in params]
    g = T.rng(T.derive_seed(seed, "fd-coords"))
    analytic, numeric = [], []
    for p, grad in zip(params, grads):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= max_coords
                  else np.sort(g.choice(n, size=max_coords, replace=False)))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = make_loss().item()
            flat[c] = orig - h
            down = make_loss().item()
            flat[c] = orig
            analytic.append(grad.reshape(-1)[c])
            numeric.append((up - down) / (2 * h))
    analytic = np.array(analytic)
    numeric = np.array(numeric)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def _op_cases(seed: int):
    g = T.rng(T.derive_seed(seed, "gradcheck-ops"))

    def rnd(*shape):
        return Tensor(g.normal(size=shape), requires_grad=True)

    a34, b45 = rnd(3, 4), rnd(4, 5)
    bm = rnd(2, 3, 4)
    sm = rnd(2, 5)
    ln_x, ln_g, ln_b = rnd(3, 6), rnd(6), rnd(6)
    e_in = rnd(4, 4)
    cases = {
        "matmul": ([a34, b45], lambda: T.matmul(a34, b45).sum()),
        "matmul_batched": ([bm, b45], lambda: T.matmul(bm, b45).sum()),
        "softmax": ([sm], lambda: T.square(T.softmax(sm, axis=-1)
                                           - Tensor(np.linspace(0, 1, 5))).sum()),
        "layer_norm": ([ln_x, ln_g, ln_b],
                       lambda: T.square(T.layer_norm(ln_x, ln_g, ln_b)).sum()),
        "add_mul": ([a34], lambda: ((a34 + a34 * a34) * Tensor(0.5)).sum()),
        "div": ([sm], lambda: (sm / Tensor(np.full((2, 5), 2.0)
                                           + np.abs(sm.data) * 0)).sum()),
        "tanh": ([a34], lambda: T.tanh(a34).sum()),
        "gelu": ([a34], lambda: T.gelu(a34).sum()),
        "exp": ([sm], lambda: T.exp(sm * Tensor(0.3)).sum()),
        "square": ([a34], lambda: T.square(a34).sum()),
        "sqrt": ([a34], lambda: T.sqrt(T.square(a34) + Tensor(1.0)).sum()),
        "mean": ([bm], lambda: bm.mean(axis=(1, 2)).sum()),
        "slice_concat": ([sm], lambda: T.concat_last(
            [T.slice_last(sm, 0, 2), T.slice_last(sm, 2, 5)]).sum()),
        "transpose_reshape": ([bm], lambda: T.square(
            T.reshape(T.transpose(bm, (0, 2, 1)), (2, 12))).sum()),
        "embedding": ([e_in], lambda: T.square(
            T.embedding(e_in, np.array([0, 2, 2, 3]))).sum()),
    }
    # keep abs away from its kink
    jit = Tensor(g.normal(size=(3, 3)) + np.sign(g.normal(size=(3, 3))) * 0.5,
                 requires_grad=True)
    cases["abs"] = ([jit], lambda: T.tabs(jit).sum())
    return cases


def gradcheck(scope: str, seed: int = 1234) -> dict[str, float]:
    """Finite-difference suite; returns per-check max relative error."""
    results: dict[str, float] = {}
    if scope == "ops":
        for name, (params, make_loss) in _op_cases(seed).items():
            results[name] = finite_diff_check(make_loss, params, seed=seed)
    elif scope == "denoiser":
        cfg = DenoiserConfig(hidden=16, depth=1, heads=2, num_tokens=4,
                             token_dim=8, cond_dim=8)
        model = Denoiser(cfg, T.derive_seed(seed, "gradcheck-model"))
        g = T.rng(T.derive_seed(seed, "gradcheck-data"))
        x = g.normal(size=(2, 4, 8))
        eps = g.normal(size=(2, 4, 8))
        t = g.random(2)
        cond = g.normal(size=(2, 8))
        sample = flow.interpolate(x, eps, t)
        results["denoiser_fm_loss"] = finite_diff_check(
            lambda: flow.fm_loss(model, sample, cond), model.parameters(),
            max_coords=8, seed=seed)
    elif scope == "losses":
        from . import rae
        g = T.rng(T.derive_seed(seed, "gradcheck-losses"))
        encoder = _losses_encoder()
        x = np.clip(0.5 + 0.2 * g.normal(size=(2, 1, 32, 32)), 0, 1)
        # offset keeps every element of x_hat - x far from the l1 kink
        x_hat = Tensor(x + 0.2 + 0.02 * g.normal(size=x.shape), requires_grad=True)
        weights = rae.LossWeights()
        results["recon_loss"] = finite_diff_check(
            lambda: rae.recon_loss(x, x_hat, weights, encoder.features)[0],
            [x_hat], max_coords=60, seed=seed)
        fa = Tensor(g.normal(size=(2, 4, 6)), requires_grad=True)
        fb = Tensor(g.normal(size=(2, 4, 6)), requires_grad=True)
        results["gram_loss"] = finite_diff_check(
            lambda: rae.gram_loss(fa, fb), [fa, fb], seed=seed)
    else:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    return results


def _losses_encoder():
    from .rae import FrozenEncoder
    return FrozenEncoder(patch=8, token_dim=16, seed=99)


def acquire_lock(out_dir: Path):
    """One experiment per output directory; raises if already locked."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    os.close(fd)
    return lock
