"""Command-line interface for widthlab."""
import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Tuple

import click

from widthlab.config import (
    LoadedConfig,
    build_limit_config,
    build_program_from_config,
    build_sweep_config,
    build_train_config,
    load_config,
    resolve_config_path,
)
from widthlab.errors import NumericalError
from widthlab.harness import backprop_check, master_theorem_check, width_sweep
from widthlab.ketvm import DEFAULT_COPIES, DEFAULT_SAMPLES, run_limit, save_snapshot
from widthlab.limits import mu_dynamics, nt_dynamics
from widthlab.mlp import train_finite_mlp
from widthlab.param import AbcdParam, classify as classify_param, parse_exponents, preset
from widthlab.program import save_program
from widthlab.report import (
    render_classification,
    render_sweep_summary,
    write_finite_traces,
    write_json,
    write_kernels,
    write_limit_trace,
    write_sweep,
)

BUNDLED_CONFIG = "width-experiments"
GRADIENT_TOLERANCE = 1e-6


@contextmanager
def _handle_errors():
    """Validation errors exit 1, numerical failures exit 2."""
    try:
        yield
    except NumericalError as e:
        click.echo(f"✗ Numerical failure: {e}", err=True)
        raise SystemExit(2)
    except (FileNotFoundError, ValueError) as e:
        click.echo(f"✗ Error: {e}", err=True)
        raise click.Abort()


def _parse_widths(ctx, param, value: Optional[str]) -> Optional[Tuple[int, ...]]:
    if value is None:
        return None
    try:
        return tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError:
        raise click.BadParameter(f"expected a comma list of integers, got '{value}'")


def shared_options(default_config: Optional[str] = BUNDLED_CONFIG):
    """--config plus the flags every workflow accepts."""
    def decorate(f):
        options = [
            click.option("--config", "config_name", default=default_config, show_default=True,
                         help="Config file or bundled config name"),
            click.option("--seed", type=int, default=None, help="Override the config seed"),
            click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
                         help="Output directory (default: config output_dir, $WIDTHLAB_OUT, results)"),
            click.option("--samples", type=click.IntRange(min=2), default=None,
                         help="Monte Carlo samples per ket"),
            click.option("--widths", callback=_parse_widths, default=None,
                         help="Comma list of widths, e.g. 64,512,4096"),
            click.option("--steps", type=click.IntRange(min=0), default=None,
                         help="Training steps"),
            click.option("--threads", type=click.IntRange(min=1), default=None,
                         help="Worker processes (default: logical cores)"),
        ]
        for option in reversed(options):
            f = option(f)
        return f
    return decorate


def _load(config_name: Optional[str], workflow: str, seed: Optional[int],
          out: Optional[Path], mode: Optional[str] = None) -> LoadedConfig:
    if config_name is None:
        raise click.UsageError("--config is required for this command")
    cfg = load_config(resolve_config_path(config_name), workflow, mode)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.output_dir = out
    return cfg


def _threads(threads: Optional[int]) -> int:
    return threads or os.cpu_count() or 1


@contextmanager
def _progress(label: str, total: int):
    with click.progressbar(length=max(total, 1), label=label, file=click.get_text_stream("stderr")) as bar:
        state = {"done": 0}

        def update(done: int, _total: int):
            bar.update(done - state["done"])
            state["done"] = done

        yield update


@click.group()
@click.version_option()
def cli():
    """widthlab - Finite-width training versus infinite-width limits of MLPs."""
    pass


@cli.command()
@click.option("--preset", "preset_name", default=None, help="SP, NTP, muP, NTP_clip, muP_clip, "
              "muP_clip_wnorm or UP")
@click.option("--s", "s", default=None, help="Feature-change exponent for UP, e.g. 1/4")
@click.option("--L", "depth", type=click.IntRange(min=1), default=2, show_default=True,
              help="Number of hidden layers")
@click.option("--a", "a", default=None, help="Comma list of a_1..a_{L+1}")
@click.option("--b", "b", default=None, help="Comma list of b_1..b_{L+1}")
@click.option("--c", "c", default=None, help="Comma list of c_1..c_{L+1}")
@click.option("--d", "d", default=None, help="Comma list of d_1..d_{L+1}")
@click.option("--e", "e", default=None, help="Comma list of e_1..e_{L+1} (default 0)")
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of a table")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Also write classification.json here")
def classify(preset_name, s, depth, a, b, c, d, e, as_json, out):
    """Classify an abcd-parametrization (exact arithmetic)."""
    with _handle_errors():
        if preset_name is not None:
            param = preset(preset_name, depth, s)
        else:
            missing = [name for name, value in zip("abcd", (a, b, c, d)) if value is None]
            if missing:
                raise ValueError(f"field '{missing[0]}': needed without --preset")
            param = AbcdParam(depth, *(parse_exponents(v) for v in (a, b, c, d)),
                              e=parse_exponents(e) if e else ())
        result = classify_param(param)
        data = {"parametrization": param.to_dict(), **result.to_dict()}
        if as_json:
            click.echo(json.dumps(data, indent=2))
        else:
            click.echo(render_classification(param, result), nl=False)
        if out is not None:
            write_json(data, out / "classification.json")
            click.echo(f"✓ Wrote {out / 'classification.json'}")


def _limit_command(workflow: str, config_name, seed, out, samples, steps):
    cfg = _load(config_name, workflow, seed, out)
    limit_cfg = build_limit_config(cfg, steps=steps, samples=samples)
    engine = nt_dynamics if workflow == "nt" else mu_dynamics
    with _progress(f"{workflow} limit", limit_cfg.steps) as update:
        trace = engine(limit_cfg, progress_callback=update)
    write_limit_trace(trace, cfg.output_dir / "limit_trace.csv")
    for l, kernels in trace.kernels.items():
        write_kernels(kernels, cfg.output_dir / f"kernel_l{l}.csv")
    click.echo(f"✓ {workflow} limit: {trace.steps} steps, {trace.outputs.shape[1]} inputs "
               f"→ {cfg.output_dir / 'limit_trace.csv'}")


@cli.command("nt-limit")
@shared_options()
def nt_limit(config_name, seed, out, samples, widths, steps, threads):
    """Run the neural tangent limit dynamics."""
    with _handle_errors():
        _limit_command("nt", config_name, seed, out, samples, steps)


@cli.command("mu-limit")
@shared_options()
def mu_limit(config_name, seed, out, samples, widths, steps, threads):
    """Run the mu-limit (feature learning) dynamics."""
    with _handle_errors():
        _limit_command("mu", config_name, seed, out, samples, steps)


@cli.command()
@shared_options()
def train(config_name, seed, out, samples, widths, steps, threads):
    """Train finite-width MLPs over widths and trials."""
    with _handle_errors():
        cfg = _load(config_name, "train", seed, out)
        train_cfg = build_train_config(cfg, widths=widths, steps=steps)
        cells = len(train_cfg.widths) * train_cfg.trials
        with _progress("training", cells) as update:
            traces = train_finite_mlp(train_cfg, threads=_threads(threads),
                                      progress_callback=update, strict=False)
        write_finite_traces(traces, cfg.output_dir / "trace.csv")
        for l in train_cfg.track_kernels:
            for width in train_cfg.widths:
                kernels = [t.kernels[l] for t in traces if t.width == width and t.diverged_at is None]
                if kernels:
                    write_kernels(sum(kernels) / len(kernels),
                                  cfg.output_dir / f"kernel_l{l}_n{width}.csv")
        for trace in traces:
            if trace.diverged_at is not None:
                click.echo(f"  width {trace.width} trial {trace.trial} diverged at step "
                           f"{trace.diverged_at}", err=True)
        click.echo(f"✓ Trained {cells} networks → {cfg.output_dir / 'trace.csv'}")


@cli.command()
@click.option("--mode", type=click.Choice(["nt", "mu"]), default="nt", show_default=True)
@shared_options()
def sweep(mode, config_name, seed, out, samples, widths, steps, threads):
    """Compare finite widths to the matching limit dynamics."""
    with _handle_errors():
        cfg = _load(config_name, "sweep", seed, out, mode=mode)
        sweep_cfg = build_sweep_config(cfg, widths=widths, steps=steps, samples=samples)
        with _progress(f"{mode} sweep", len(sweep_cfg.widths) * sweep_cfg.trials) as update:
            report = width_sweep(sweep_cfg, threads=_threads(threads), progress_callback=update)
        files = write_sweep(report, cfg.output_dir)
        click.echo(render_sweep_summary(report, files), nl=False)
        click.echo(f"✓ Sweep finished in {report.runtime:.1f}s")


@cli.command("ket-run")
@click.option("--check", is_flag=True,
              help="Run the finite-vs-limit scalar check of the ketcheck section")
@click.option("--dot-mode", type=click.Choice(["chain", "stein"]), default="chain",
              show_default=True)
@shared_options(default_config=None)
def ket_run(check, dot_mode, config_name, seed, out, samples, widths, steps, threads):
    """Run a program in the infinite-width limit."""
    with _handle_errors():
        if check:
            cfg = _load(config_name or BUNDLED_CONFIG, "ketcheck", seed, out)
            program = build_program_from_config(cfg)
            scalar = cfg.get("scalar")
            if scalar is None:
                raise cfg.error("scalar", "missing scalar to track")
            widths = widths or cfg.int_list("widths", tuple(2 ** k for k in range(6, 13)))
            trials = cfg.number("trials", 32, int, minimum=2)
            with _progress("ketcheck", len(widths) * trials) as update:
                report = master_theorem_check(
                    program, str(scalar), cfg.number("limit_value", None), widths, trials, cfg.seed,
                    samples or cfg.number("limit.samples", DEFAULT_SAMPLES, int, minimum=2),
                    threads=_threads(threads), progress_callback=update)
            write_json(report.to_dict(), cfg.output_dir / "ketcheck.json")
            fit = report.fit
            click.echo(f"{scalar}: limit {report.limit:.6g}, slope {fit.slope:.3f} "
                       f"[{fit.ci_low:.3f}, {fit.ci_high:.3f}]")
            click.echo(f"✓ Wrote {cfg.output_dir / 'ketcheck.json'}")
            return

        cfg = _load(config_name, "program", seed, out)
        program = build_program_from_config(cfg)
        m = samples or cfg.number("samples", DEFAULT_SAMPLES, int, minimum=2)
        state = run_limit(program, m, cfg.seed,
                          copies=cfg.number("copies", DEFAULT_COPIES, int, minimum=1),
                          dot_mode=dot_mode)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        save_program(program, cfg.output_dir / "program.json")
        save_snapshot(state, cfg.output_dir / "kets.npz")
        for name, value in state.limit_scalars.items():
            click.echo(f"{name} = {value:.6g}")
        click.echo(f"✓ {len(state.columns)} kets, m={m} → {cfg.output_dir / 'kets.npz'}")


@cli.command("backprop-check")
@click.option("--L", "depth", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--width", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--input-dim", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--activation", default="gelu", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def backprop_check_command(depth, width, input_dim, activation, seed):
    """Check program backpropagation against central finite differences."""
    with _handle_errors():
        errors = backprop_check(depth, width, input_dim, activation, seed)
        for name, err in errors.items():
            click.echo(f"  {name}: relative error {err:.2e}")
        worst = max(errors.values())
        if worst > GRADIENT_TOLERANCE:
            raise ValueError(f"gradient mismatch: relative error {worst:.2e} > {GRADIENT_TOLERANCE}")
        click.echo(f"✓ All gradients match (max relative error {worst:.2e})")


if __name__ == '__main__':
    cli()
