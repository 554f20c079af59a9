"""Command-line surface: data generation, training, evaluation, ablations.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure. All outputs are deterministic for fixed seeds (no
timestamps), so identical invocations produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict
from pathlib import Path

import click

from . import __version__
from .embedding_store import SynthConfig, load_embeddings, make_synthetic, save_embeddings
from .errors import ConfigError, DataError, NumericalError
from .generator import save_checkpoint
from .trainer import (
    TrainConfig,
    ablate,
    evaluate,
    harmonic_mean,
    load_state,
    save_state,
    train,
)

METRIC_COLUMNS = (
    "epoch", "base_acc", "new_acc", "harmonic_mean",
    "known_ce", "synth_ce", "distill_mse", "m_t", "teacher_lo", "teacher_hi",
)

ABLATION_COLUMNS = (
    "variant", "base_mean", "base_std", "new_mean", "new_std", "h_mean", "h_std", "seeds",
)


@click.group()
@click.version_option(version=__version__, prog_name="ogen")
def cli():
    """Feature-synthesis regularized finetuning on embedding datasets."""


@cli.command("gen-data")
@click.option("--classes", type=int, default=50, show_default=True, help="Number of classes.")
@click.option("--dim", type=int, default=64, show_default=True, help="Embedding dimension.")
@click.option("--per-class", type=int, default=40, show_default=True, help="Image features per class.")
@click.option("--image-noise", type=float, default=0.15, show_default=True)
@click.option("--text-noise", type=float, default=0.4, show_default=True)
@click.option("--base-frac", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output .oef path.")
def gen_data(classes, dim, per_class, image_noise, text_noise, base_frac, seed, out):
    """Generate a synthetic embedding dataset and write it to disk."""
    cfg = SynthConfig(
        num_classes=classes,
        dim=dim,
        per_class=per_class,
        image_noise=image_noise,
        text_noise=text_noise,
        base_fraction=base_frac,
        seed=seed,
    )
    dataset = make_synthetic(cfg)
    out_path = Path(out)
    if out_path.parent and not out_path.parent.exists():
        out_path.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(dataset, out_path)
    counts = [f.shape[0] for f in dataset.image_features]
    click.echo(
        f"wrote {out_path}: {dataset.num_classes} classes, dim {dataset.dim}, "
        f"{min(counts)}-{max(counts)} features/class, "
        f"split base={len(dataset.split.base)} new={len(dataset.split.new)}"
    )


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _append_metrics_row(fh, row):
    fh.write(",".join(_format_cell(getattr(row, col)) for col in METRIC_COLUMNS) + "\n")


def _truncate_metrics(path: Path, next_epoch: int) -> None:
    lines = path.read_text().splitlines()
    kept = [lines[0]]
    for line in lines[1:]:
        if line and int(line.split(",", 1)[0]) < next_epoch:
            kept.append(line)
    path.write_text("\n".join(kept) + "\n")


@cli.command("train")
@click.option("--data", type=click.Path(exists=False), required=True, help="Dataset (.oef).")
@click.option("--out", type=click.Path(file_okay=False), default="ogen-run", show_default=True)
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--k", type=int, default=3, show_default=True, help="Neighbor classes per synthesis.")
@click.option("--scheme", type=click.Choice(["none", "per_class", "joint"]), default="joint", show_default=True)
@click.option("--distill", type=click.Choice(["none", "mt", "almt", "fixed"]), default="almt", show_default=True)
@click.option("--window", type=int, default=None, help="Window size for --distill fixed.")
@click.option("--tau", type=float, default=0.01, show_default=True)
@click.option("--lr", type=float, default=0.02, show_default=True, help="Embedding learning rate.")
@click.option("--gen-lr", type=float, default=0.02, show_default=True, help="Generator learning rate.")
@click.option("--momentum", type=float, default=0.9, show_default=True)
@click.option("--lambda-syn", type=float, default=2.0, show_default=True)
@click.option("--lambda-distill", type=float, default=1.0, show_default=True)
@click.option("--pseudo-unknown-fraction", type=float, default=0.3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--heads", type=int, default=4, show_default=True)
@click.option("--d-ff", type=int, default=None, help="FFN width (default 2*dim).")
@click.option("--m-min", type=int, default=2, show_default=True)
@click.option("--m-max", type=int, default=9, show_default=True)
@click.option("--ema-alpha", type=float, default=0.9, show_default=True)
@click.option("--random-neighbors", is_flag=True, help="Sample neighbors at random instead of kNN.")
@click.option(
    "--known-denominator",
    type=click.Choice(["union", "known"]),
    default="union",
    show_default=True,
    help="Class set in the known-loss softmax denominator.",
)
@click.option("--resume", is_flag=True, help="Continue the run stored in --out.")
@click.option("--plot", is_flag=True, help="Write an SVG of the learning curves.")
def cmd_train(
    data, out, epochs, batch_size, k, scheme, distill, window, tau, lr, gen_lr,
    momentum, lambda_syn, lambda_distill, pseudo_unknown_fraction, seed, heads,
    d_ff, m_min, m_max, ema_alpha, random_neighbors, known_denominator, resume, plot,
):
    """Finetune on the base split of a dataset and log per-epoch metrics."""
    run_dir = Path(out)
    state_path = run_dir / "state.bin"
    metrics_path = run_dir / "metrics.csv"
    config_path = run_dir / "config.json"

    if window is not None and distill != "fixed":
        raise ConfigError("--window is only meaningful with --distill fixed")

    if resume:
        if not state_path.exists():
            raise DataError(f"cannot resume: {state_path} does not exist")
        state, cfg = load_state(state_path)
        stored = json.loads(config_path.read_text())
        data = stored.get("data", data)
        if state.next_epoch >= cfg.epochs:
            click.echo(f"run already complete at epoch {cfg.epochs}; nothing to do")
            return
        _truncate_metrics(metrics_path, state.next_epoch)
        click.echo(f"resuming from epoch {state.next_epoch}")
    else:
        cfg = TrainConfig(
            epochs=epochs,
            batch_size=batch_size,
            k=k,
            scheme=scheme,
            distill=distill,
            fixed_window=window,
            tau=tau,
            learning_rate=lr,
            generator_lr=gen_lr,
            momentum=momentum,
            lambda_syn=lambda_syn,
            lambda_distill=lambda_distill,
            pseudo_unknown_fraction=pseudo_unknown_fraction,
            seed=seed,
            heads=heads,
            d_ff=d_ff,
            m_min=m_min,
            m_max=m_max,
            ema_alpha=ema_alpha,
            random_neighbors=random_neighbors,
            known_loss_union=known_denominator == "union",
        )
        state = None

    dataset = load_embeddings(data)
    cfg.validate(dataset)

    if not resume:
        run_dir.mkdir(parents=True, exist_ok=True)
        config = {
            "config": asdict(cfg),
            "data": str(data),
            "k_requested": cfg.k,
            "k_effective": cfg.effective_k(dataset),
        }
        if config["k_effective"] != cfg.k:
            config["warnings"] = [
                f"k clamped from {cfg.k} to {config['k_effective']} (pseudo-known classes)"
            ]
        config_path.write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")
        metrics_path.write_text(",".join(METRIC_COLUMNS) + "\n")

    with open(metrics_path, "a") as fh:

        def on_epoch(state, row):
            _append_metrics_row(fh, row)
            fh.flush()
            save_state(state_path, state, cfg)

        result = train(dataset, cfg, state=state, on_epoch=on_epoch)

    if result.params is not None:
        save_checkpoint(run_dir / "checkpoint.bin", result.params, cfg.scheme, cfg.epochs - 1)
    if plot:
        (run_dir / "curves.svg").write_text(_render_curves_svg(metrics_path))
    final = result.metrics[-1] if result.metrics else None
    if final is not None:
        click.echo(
            f"done: epoch {final.epoch} base={final.base_acc:.4f} "
            f"new={final.new_acc:.4f} H={final.harmonic_mean:.4f}"
        )


@cli.command("eval")
@click.option("--run", "run_dir", type=click.Path(file_okay=False), required=True)
@click.option("--data", type=click.Path(), default=None, help="Override the dataset path.")
@click.option("--csv", "as_csv", is_flag=True, help="Emit a machine-readable row.")
def cmd_eval(run_dir, data, as_csv):
    """Evaluate the checkpoint of a finished (or partial) run."""
    run = Path(run_dir)
    state_path = run / "state.bin"
    if not state_path.exists():
        raise DataError(f"no checkpoint state found at {state_path}")
    state, cfg = load_state(state_path)
    if data is None:
        config_path = run / "config.json"
        if not config_path.exists():
            raise DataError(f"{config_path} missing; pass --data explicitly")
        data = json.loads(config_path.read_text())["data"]
    dataset = load_embeddings(data)
    base_acc, new_acc, h = evaluate(state.params, state.embeddings, dataset, cfg.tau)
    if as_csv:
        click.echo("base_acc,new_acc,harmonic_mean")
        click.echo(f"{base_acc!r},{new_acc!r},{h!r}")
    else:
        click.echo(f"epoch {state.next_epoch - 1}")
        click.echo(f"base accuracy     {base_acc:.4f}")
        click.echo(f"new accuracy      {new_acc:.4f}")
        click.echo(f"harmonic mean     {h:.4f}")


@cli.command("hmean")
@click.argument("base", type=float)
@click.argument("new", type=float)
def cmd_hmean(base, new):
    """Harmonic mean of two accuracies (utility)."""
    click.echo(f"{harmonic_mean(base, new):.4f}")


@cli.command("ablate")
@click.option("--data", type=click.Path(), required=True)
@click.option("--out", type=click.Path(file_okay=False), default="ogen-ablation", show_default=True)
@click.option("--seeds", type=int, default=3, show_default=True)
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--k", type=int, default=3, show_default=True)
@click.option("--tau", type=float, default=0.01, show_default=True)
@click.option("--lr", type=float, default=0.02, show_default=True)
@click.option("--gen-lr", type=float, default=0.02, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_ablate(data, out, seeds, epochs, batch_size, k, tau, lr, gen_lr, seed):
    """Run the ablation grid and write one CSV per table."""
    dataset = load_embeddings(data)
    base_cfg = TrainConfig(
        epochs=epochs,
        batch_size=batch_size,
        k=k,
        tau=tau,
        learning_rate=lr,
        generator_lr=gen_lr,
        seed=seed,
    )
    report = ablate(dataset, base_cfg, seeds=seeds)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, rows in report.tables().items():
        path = out_dir / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ABLATION_COLUMNS)
            for row in rows:
                writer.writerow([_format_cell(row[col]) for col in ABLATION_COLUMNS])
        click.echo(f"wrote {path}")


def _render_curves_svg(metrics_path) -> str:
    """Minimal SVG line chart of base/new accuracy over epochs."""
    epochs, base, new = [], [], []
    with open(metrics_path) as fh:
        for record in csv.DictReader(fh):
            epochs.append(int(record["epoch"]))
            base.append(float(record["base_acc"]))
            new.append(float(record["new_acc"]))
    width, height, margin = 720, 440, 56
    x_span = max(max(epochs), 1) if epochs else 1
    plot_w, plot_h = width - 2 * margin, height - 2 * margin

    def xy(e, acc):
        x = margin + plot_w * (e / x_span)
        y = margin + plot_h * (1.0 - acc)
        return f"{x:.2f},{y:.2f}"

    def polyline(values, color):
        pts = " ".join(xy(e, v) for e, v in zip(epochs, values))
        return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'

    ticks = []
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = margin + plot_h * (1.0 - frac)
        ticks.append(
            f'<line x1="{margin}" y1="{y:.2f}" x2="{width - margin}" y2="{y:.2f}" '
            f'stroke="#dddddd" stroke-width="0.5"/>'
            f'<text x="{margin - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="11">{frac:.2f}</text>'
        )
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        *ticks,
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        polyline(base, "#1f77b4"),
        polyline(new, "#ff7f0e"),
        f'<text x="{width - margin - 150}" y="{margin}" font-size="12" fill="#1f77b4">base accuracy</text>',
        f'<text x="{width - margin - 150}" y="{margin + 16}" font-size="12" fill="#ff7f0e">new accuracy</text>',
        f'<text x="{width / 2:.0f}" y="{height - 14}" text-anchor="middle" font-size="12">epoch</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def main(argv=None) -> int:
    """Dispatch with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except (DataError, ConfigError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    return 0


def entry() -> None:
    raise SystemExit(main())
