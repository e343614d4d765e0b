#!/usr/bin/env python
"""
SACF Command Line
gen / train / calibrate / eval / analyze / agreement / sweep / stats over one JSON RunConfig

Exit codes: 0 success, 2 input or validation error, 3 numerical or training failure.
"""

import logging
import sys
from functools import wraps
from pathlib import Path
from typing import Any, Dict, List, Optional

import click

from sacf.errors import InputError, SacfError
from sacf.experts import AugConfig, ExpertHyper, ExpertKind, load_expert, save_expert, train_expert
from sacf.gate_sca import (
    CALIBRATION_TAUS, DEFAULT_TAU, GateHyper, GateParams, load_gate, save_gate, score_annotation, threshold_sweep,
    train_gate,
)
from sacf.metrics import annotator_agreement, compare_reports
from sacf.monitoring import set_stage_callback
from sacf.pipeline import (
    EvalMode, SacfModel, calibrate_gate, evaluate, load_predictions, save_predictions, scenario_analysis,
)
from sacf.reporting import (
    EvalBundle, category_table, format_table, report_summary, write_agreement, write_distribution_csv,
    write_eval_reports, write_scenario_csv, write_sweep_csv,
)
from sacf.scene_model import SPLITS, Dataset, load_dataset, save_dataset
from sacf.settings import PathsConfig, RunConfig, load_run_config
from sacf.synth_gen import make_dataset

logger = logging.getLogger("sacf")

TRAIN_TARGETS = ("aware", "agnostic", "gate")
_PATHS = PathsConfig()
_EXPERT = ExpertHyper()
_GATE = GateHyper()
_FIELDS = RunConfig.model_fields


# ============== HELPERS ==============

def _drop_none(d: Dict[str, Any]) -> Dict[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            v = _drop_none(v)
            if not v:
                continue
        if v is not None:
            out[k] = v
    return out


def parse_threshold_spec(spec: str) -> List[float]:
    """'start:stop:step' (inclusive stop) or a comma list, e.g. '0.1:0.9:0.2' -> 0.1, 0.3, 0.5, 0.7, 0.9."""
    try:
        if ":" in spec:
            start, stop, step = (float(p) for p in spec.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(round((stop - start) / step)) + 1
            values = [round(start + k * step, 10) for k in range(n)]
        else:
            values = [float(p) for p in spec.split(",") if p.strip()]
    except ValueError:
        raise InputError(f"invalid threshold spec {spec!r}; use start:stop:step or a comma list")
    if not values or any(not 0.0 <= v <= 1.0 for v in values):
        raise InputError(f"thresholds in {spec!r} must lie in [0, 1]")
    return values


class StageTimer:
    """Stage callback that remembers the last duration of each stage."""

    def __init__(self):
        self.durations: Dict[str, float] = {}

    def __call__(self, event: str, data: dict):
        if event in ('stage_complete', 'stage_error'):
            self.durations[data['stage']] = data['duration']


def handle_errors(func):
    """Map SacfError (and unreadable/unwritable paths) to an exit code with a one-line message on stderr."""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except SacfError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)
        except OSError as e:
            err = InputError(f"{e.strerror or e}: {e.filename}" if e.filename else str(e))
            click.echo(f"error: {err}", err=True)
            sys.exit(err.exit_code)
    return wrapper


def _run_config(ctx: click.Context, **overrides) -> RunConfig:
    obj = ctx.obj
    merged = dict(obj["overrides"])
    for key, value in _drop_none(overrides).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    cfg = load_run_config(obj["config_path"], merged)
    logger.debug("run config: %s", cfg.model_dump_json())
    return cfg


def _explicit_aug(cfg: RunConfig) -> Optional[AugConfig]:
    # unset -> the aware expert's own training augmentation
    return cfg.aug if "aug" in cfg.model_fields_set else None


def _load(cfg: RunConfig, filter_noninclusive: Optional[bool] = None) -> Dataset:
    flt = cfg.filter_noninclusive if filter_noninclusive is None else filter_noninclusive
    return load_dataset(cfg.paths.dataset_dir, strict=cfg.strict, filter_noninclusive=flt)


# ============== CLI GROUP ==============

@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON RunConfig file.  [default: none; SACF_* environment and built-in defaults]")
@click.option("--data-dir", type=click.Path(file_okay=False), default=None,
              help=f"Dataset directory.  [default: {_PATHS.dataset_dir.as_posix()}]")
@click.option("--model-dir", type=click.Path(file_okay=False), default=None,
              help=f"Model directory.  [default: {_PATHS.model_dir.as_posix()}]")
@click.option("--report-dir", type=click.Path(file_okay=False), default=None,
              help=f"Report directory.  [default: {_PATHS.report_dir.as_posix()}]")
@click.option("--seed", type=int, default=None,
              help=f"Global seed (overrides config and SACF_SEED).  [default: {_FIELDS['seed'].default}]")
@click.option("--threads", type=int, default=None,
              help=f"Worker cap; never changes output bytes.  [default: {_FIELDS['threads'].default}]")
@click.option("--strict/--lenient", default=None, help="Reject unknown JSONL fields.  [default: lenient]")
@click.option("--filter-noninclusive/--keep-noninclusive", default=None,
              help="Drop Noninclusive frames on load.  [default: filter]")
@click.option("-v", "--verbose", is_flag=True, help="DEBUG logging.")
@click.option("-q", "--quiet", is_flag=True, help="WARNING logging, no progress bars.")
@click.pass_context
def cli(ctx, config_path, data_dir, model_dir, report_dir, seed, threads, strict, filter_noninclusive,
        verbose, quiet):
    """Socially aware coarse-to-fine gaze target detection experiments."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)

    timer = StageTimer()
    set_stage_callback(timer)
    ctx.obj = {
        "config_path": config_path,
        "overrides": _drop_none({
            "paths": {"dataset_dir": data_dir, "model_dir": model_dir, "report_dir": report_dir},
            "seed": seed,
            "threads": threads,
            "strict": strict,
            "filter_noninclusive": filter_noninclusive,
        }),
        "timer": timer,
        "progress": not quiet and sys.stderr.isatty(),
    }


# ============== GEN ==============

@cli.command()
@click.option("--n-frames", type=int, default=None, help="Frames to generate.  [default: 16582]")
@click.option("--include-noninclusive", type=float, default=None,
              help="Probability of emitting a Noninclusive frame.  [default: 0.0]")
@click.pass_context
@handle_errors
def gen(ctx, n_frames, include_noninclusive):
    """Generate the synthetic train/val/test dataset."""
    cfg = _run_config(ctx, gen={"n_frames": n_frames, "include_noninclusive": include_noninclusive})
    dataset = make_dataset(cfg.gen, threads=cfg.threads, progress=ctx.obj["progress"])
    written = save_dataset(dataset, cfg.paths.dataset_dir)
    gen_config = Path(cfg.paths.dataset_dir) / "gen_config.json"
    gen_config.write_text(cfg.gen.model_dump_json(indent=2) + "\n", encoding="utf-8")

    click.echo(format_table(category_table(dataset), float_format="{:.1f}"))
    click.echo(f"\nwrote {len(written) + 1} files to {cfg.paths.dataset_dir} "
               f"(hash {dataset.metadata.config_hash}, seed {dataset.metadata.seed})")


# ============== TRAIN ==============

@cli.command()
@click.argument("target", type=click.Choice(TRAIN_TARGETS))
@click.option("--epochs", type=int, default=None,
              help=f"Override the configured epoch count.  "
                   f"[default: {_EXPERT.epochs} for experts, {_GATE.epochs} for the gate]")
@click.option("--lr", "learning_rate", type=float, default=None,
              help=f"Override the configured learning rate.  "
                   f"[default: {_EXPERT.learning_rate} for experts, {_GATE.learning_rate} for the gate]")
@click.pass_context
@handle_errors
def train(ctx, target, epochs, learning_rate):
    """Train the aware expert, the agnostic expert or the gate on the train split."""
    section = "gate" if target == "gate" else "expert"
    cfg = _run_config(ctx, **{section: {"epochs": epochs, "learning_rate": learning_rate}})
    dataset = _load(cfg)
    train_split = dataset.require_split("train")
    out = cfg.paths.model_file(target)

    if target == "gate":
        params = train_gate(train_split, cfg.gate, progress=ctx.obj["progress"])
        save_gate(params, out)
        history, stage = params.meta.loss_history, "train_gate"
    else:
        params = train_expert(train_split, ExpertKind(target), cfg.expert, cfg.aug, progress=ctx.obj["progress"])
        save_expert(params, out)
        history, stage = params.meta.loss_history, "train_expert"

    elapsed = ctx.obj["timer"].durations.get(stage, 0.0)
    click.echo(f"{target}: final loss {history[-1]:.6f} (initial {history[0]:.6f}) in {elapsed:.2f}s -> {out}")

    if target == "gate":
        experts = [cfg.paths.model_file(k) for k in ("aware", "agnostic")]
        val = dataset.split("val").inclusive()
        if all(p.exists() for p in experts) and len(val):
            params = _calibrate(ctx, cfg, params, val, "val", CALIBRATION_TAUS)
            save_gate(params, out)
        else:
            logger.warning("gate left uncalibrated (needs both experts and a val split); routing uses tau=%s "
                           "until `calibrate` runs", DEFAULT_TAU)


def _calibrate(ctx: click.Context, cfg: RunConfig, gate: GateParams, split: Dataset, split_name: str,
               taus) -> GateParams:
    aware = load_expert(cfg.paths.model_file("aware"))
    agnostic = load_expert(cfg.paths.model_file("agnostic"))
    model = SacfModel.from_params(aware, agnostic, gate, aug=_explicit_aug(cfg))
    gate = calibrate_gate(model, split, taus, split_name=split_name, threads=cfg.threads,
                          progress=ctx.obj["progress"])
    cal = gate.meta.calibration
    click.echo(f"gate: tau {cal.tau:.2f} on {split_name} ({cal.routed_face}/{cal.n_frames} routed aware, "
               f"Face recall {cal.recall_face:.4f}); L2 {cal.l2_routed:.4f} vs agnostic {cal.l2_agnostic:.4f}")
    return gate


# ============== CALIBRATE ==============

@cli.command()
@click.option("--split", type=click.Choice(SPLITS), default="val", show_default=True)
@click.option("--taus", default="0.0:1.0:0.01", show_default=True, help="Candidate thresholds as start:stop:step.")
@click.pass_context
@handle_errors
def calibrate(ctx, split, taus):
    """Store with the gate the tau that minimizes SACF mean L2 on a held-out split."""
    cfg = _run_config(ctx)
    path = cfg.paths.model_file("gate")
    gate = load_gate(path)
    held_out = _load(cfg).require_split(split)
    save_gate(_calibrate(ctx, cfg, gate, held_out, split, parse_threshold_spec(taus)), path)


# ============== EVAL ==============

@cli.command("eval")
@click.option("--mode", "modes", type=click.Choice([m.value for m in EvalMode]), multiple=True,
              help="Evaluation mode; repeatable.  [default: all four]")
@click.option("--tau", type=float, default=None,
              help="Routing threshold.  [default: the gate's calibrated tau, else 0.5]")
@click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)
@click.option("--predictions/--no-predictions", default=False, show_default=True,
              help="Write per-frame predictions JSONL for each mode.")
@click.option("--dump-heatmaps", type=int, default=0, show_default=True,
              help="Write both experts' heatmaps as CSV for the first N frames.")
@click.pass_context
@handle_errors
def eval_cmd(ctx, modes, tau, split, predictions, dump_heatmaps):
    """Evaluate SACF, its oracle upper bound and the single-expert baselines."""
    cfg = _run_config(ctx, tau=tau, modes=list(modes) or None)
    aware = load_expert(cfg.paths.model_file("aware"))
    agnostic = load_expert(cfg.paths.model_file("agnostic"))
    gate = load_gate(cfg.paths.model_file("gate")) if EvalMode.SACF in cfg.modes else None
    model = SacfModel.from_params(aware, agnostic, gate, tau=cfg.tau, aug=_explicit_aug(cfg))
    if gate is not None:
        source = "given" if cfg.tau is not None else ("calibrated" if gate.meta.calibration else "default")
        logger.info("routing at tau=%s (%s)", model.tau, source)
    eval_split = _load(cfg).require_split(split)
    report_dir = Path(cfg.paths.report_dir)

    reports = []
    for mode in cfg.modes:
        report, preds = evaluate(
            model, eval_split, mode, threads=cfg.threads, progress=ctx.obj["progress"],
            dump_dir=report_dir / "heatmaps" if dump_heatmaps else None, dump_count=dump_heatmaps,
        )
        reports.append(report)
        if predictions:
            save_predictions(preds, report_dir / f"predictions_{mode.value}.jsonl")
        click.echo(report_summary(report))

    by_mode = {r.mode: r for r in reports}
    baseline = by_mode.get(EvalMode.AGNOSTIC.value)
    comparisons = [compare_reports(r, baseline) for r in reports if baseline is not None and r is not baseline]
    write_eval_reports(EvalBundle(reports=reports, comparisons=comparisons),
                       report_dir / "eval_report.json", report_dir / "eval_report.csv")
    for c in comparisons:
        if c.l2_face_change is not None:
            click.echo(f"{c.mode} vs {c.baseline}: L2_face {100 * c.l2_face_change:+.1f}%, "
                       f"L2 {100 * c.l2_mean_change:+.1f}%")


# ============== ANALYZE ==============

@cli.command()
@click.option("--predictions", "predictions_path", type=click.Path(dir_okay=False), default=None,
              help="Predictions JSONL.  [default: <report-dir>/predictions_sacf.jsonl]")
@click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Scenario CSV.  [default: <report-dir>/scenarios.csv]")
@click.pass_context
@handle_errors
def analyze(ctx, predictions_path, split, out):
    """Compare both experts' L2 per (routed, ground truth) scenario."""
    cfg = _run_config(ctx)
    report_dir = Path(cfg.paths.report_dir)
    preds = load_predictions(predictions_path or report_dir / "predictions_sacf.jsonl")
    rows = scenario_analysis(preds, _load(cfg).require_split(split))
    path = write_scenario_csv(rows, out or report_dir / "scenarios.csv")
    click.echo(format_table(rows))
    click.echo(f"\nwrote {path}")


# ============== AGREEMENT ==============

@cli.command()
@click.argument("file_a", type=click.Path())
@click.argument("file_b", type=click.Path())
@click.option("--thresholds", default="0.1:0.9:0.1", show_default=True,
              help="IoU thresholds as start:stop:step or a comma list.")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Agreement CSV.  [default: <report-dir>/agreement.csv]")
@click.pass_context
@handle_errors
def agreement(ctx, file_a, file_b, thresholds, out):
    """IoU agreement curve, category confusion and Cohen's kappa between two annotators."""
    cfg = _run_config(ctx)
    taus = parse_threshold_spec(thresholds)

    def labels(path):
        ds = load_dataset(path, strict=cfg.strict, filter_noninclusive=False)
        return [(a.frame_id, a.target_category, a.target_box) for a in ds.annotations]

    result = annotator_agreement(labels(file_a), labels(file_b), taus)
    csv_path = Path(out) if out else Path(cfg.paths.report_dir) / "agreement.csv"
    write_agreement(result, csv_path, csv_path.with_suffix(".json"))
    click.echo(f"{result.n_pairs} shared frames ({result.n_box_pairs} with boxes); kappa {result.kappa:.4f}")
    for t, r in zip(result.thresholds, result.agreement_rate):
        click.echo(f"  IoU > {t:.2f}: {r:.4f}")


# ============== SWEEP ==============

@cli.command()
@click.option("--taus", default="0.0:1.0:0.05", show_default=True, help="Thresholds as start:stop:step.")
@click.option("--split", type=click.Choice(SPLITS), default="val", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Sweep CSV.  [default: <report-dir>/sweep.csv]")
@click.pass_context
@handle_errors
def sweep(ctx, taus, split, out):
    """Gate Face precision / recall / routing accuracy over a tau grid."""
    cfg = _run_config(ctx)
    gate = load_gate(cfg.paths.model_file("gate"))
    frames = _load(cfg).require_split(split).annotations
    scores = [score_annotation(gate, a) for a in frames]
    rows = threshold_sweep(scores, [a.binary_label() for a in frames], parse_threshold_spec(taus))
    path = write_sweep_csv(rows, out or Path(cfg.paths.report_dir) / "sweep.csv")
    click.echo(format_table(rows))
    click.echo(f"\nwrote {path}")


# ============== STATS ==============

@cli.command()
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Optional distribution CSV.")
@click.pass_context
@handle_errors
def stats(ctx, out):
    """Gaze-target distribution of a dataset per category and split."""
    cfg = _run_config(ctx)
    rows = category_table(_load(cfg, filter_noninclusive=False))
    click.echo(format_table(rows, float_format="{:.1f}"))
    if out:
        click.echo(f"\nwrote {write_distribution_csv(rows, out)}")


if __name__ == "__main__":
    cli()
