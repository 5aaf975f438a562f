#!/usr/bin/env python3
"""
Command-line entry point for the retinal vessel map leakage audit.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import os

# single-threaded BLAS keeps float reductions in a fixed order
os.environ.setdefault('OMP_NUM_THREADS', '1')

import functools
import logging
import sys
from pathlib import Path

import click
import pandas as pd

import utils
from audit_pipeline import AuditConfig, AuditPlan, LeakageAudit, PlanEntry, default_plan
from config import CHANCE_BAND, DEFAULT_RATIOS
from rvm_audit.cohort import (PARTITIONS, ManifestError, SplitAssignment, SplitError, balance_table,
                              load_manifest, split)
from rvm_audit.imagecore import read_gray, write_gray
from rvm_audit.learner import load_checkpoint, predict, save_checkpoint, train
from rvm_audit.metrics import evaluate
from rvm_audit.synth import CohortSpec, gen_cohort
from rvm_audit.transforms import VARIANTS, apply_variant

logger = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_USAGE = 2


def guarded(fn):
    """Map configuration problems to exit 2 and runtime failures to exit 1"""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit):
            raise
        except (utils.ConfigError, ManifestError, SplitError) as e:
            click.echo("error: %s" % e, err=True)
            sys.exit(EXIT_USAGE)
        except Exception as e:
            logger.debug("command failed", exc_info=True)
            click.echo("error: %s: %s" % (type(e).__name__, e), err=True)
            sys.exit(EXIT_RUNTIME)
    return wrapper


def _entry_from_flags(variant, lower, upper, binarize, skeletonize):
    if variant is None:
        if skeletonize and not binarize:
            raise click.UsageError("--skeletonize needs --binarize: skeletons are defined on binary masks")
        variant = 'skeletonized' if skeletonize else 'binarized' if binarize else 'grayscale'
    try:
        return PlanEntry(name='cli', variant=variant, lower=lower, upper=upper)
    except Exception as e:
        raise click.UsageError(str(e))


def _audit_config(config_path, **overrides):
    return utils.load_model(AuditConfig, config_path, overrides)


def _assignment(manifest, split_path, config):
    if split_path:
        return SplitAssignment.read(split_path)
    return split(manifest, config.ratios, config.split_seed)


threshold_options = [
    click.option('--variant', type=click.Choice(list(VARIANTS) + ['color']), default=None,
                 help='Image variant; overrides --binarize/--skeletonize'),
    click.option('--lower', type=int, default=0, show_default=True, help='Keep PIV >= lower'),
    click.option('--upper', type=int, default=None, help='Also drop PIV > upper'),
    click.option('--binarize', is_flag=True, help='Map surviving pixels to 255'),
    click.option('--skeletonize', is_flag=True, help='Thin the binary mask (needs --binarize)'),
]


def with_threshold_options(fn):
    for option in reversed(threshold_options):
        fn = option(fn)
    return fn


@click.group()
@click.option('--log-level', default='INFO', show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']))
@click.option('--log-json', is_flag=True, help='Emit JSON log records')
def cli(log_level, log_json):
    """Audit how much protected-attribute signal survives in retinal vessel maps."""
    utils.setup_logging(log_level, log_json)


@cli.command('synth')
@click.argument('spec_path', type=click.Path(exists=True, dir_okay=False))
@click.argument('out_dir', type=click.Path(file_okay=False))
@click.option('--seed', type=int, default=None, help='Override the cohort seed')
@click.option('--no-rfi', is_flag=True, help='Skip fundus photographs')
@click.option('--jobs', type=int, default=1, show_default=True)
@guarded
def cmd_synth(spec_path, out_dir, seed, no_rfi, jobs):
    """Generate a synthetic cohort from a JSON CohortSpec."""
    spec = utils.load_model(CohortSpec, spec_path, {'seed': seed})
    manifest = gen_cohort(spec, out_dir, with_rfi=not no_rfi, jobs=jobs)
    click.echo("%d subjects, %d images" % (manifest.n_subjects, manifest.n_images))
    click.echo(str(Path(out_dir) / 'manifest.csv'))


@cli.command('transform')
@click.argument('manifest_path', type=click.Path(exists=True, dir_okay=False))
@click.argument('out_dir', type=click.Path(file_okay=False))
@with_threshold_options
@guarded
def cmd_transform(manifest_path, out_dir, variant, lower, upper, binarize, skeletonize):
    """Threshold -> binarize -> skeletonize every image of a manifest."""
    entry = _entry_from_flags(variant, lower, upper, binarize, skeletonize)
    if entry.variant == 'color':
        raise click.UsageError("transform works on vessel maps only")
    manifest = load_manifest(manifest_path)
    out_dir = Path(out_dir)
    (out_dir / 'images').mkdir(parents=True, exist_ok=True)

    frame = manifest.frame()
    new_paths = []
    for row, path in enumerate(frame['image_path']):
        src = manifest.resolve(path)
        if not src.exists():
            raise FileNotFoundError("missing image %s" % src)
        # unique per row even when source stems repeat
        rel = Path('images') / ('%05d_%s.pgm' % (row, Path(path).stem))
        write_gray(apply_variant(read_gray(src), entry.variant, entry.threshold), out_dir / rel)
        new_paths.append(rel.as_posix())
    frame['image_path'] = new_paths
    frame.drop(columns='image_id').to_csv(out_dir / 'manifest.csv', index=False)
    click.echo("%s %s: %d images -> %s" % (entry.variant, entry.threshold.label, len(frame),
                                           out_dir / 'manifest.csv'))


@cli.command('split')
@click.argument('manifest_path', type=click.Path(exists=True, dir_okay=False))
@click.argument('out_path', type=click.Path(dir_okay=False))
@click.option('--ratios', type=float, nargs=3, default=DEFAULT_RATIOS, show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--balance', type=click.Path(dir_okay=False), default=None,
              help='Also write the covariate balance table here')
@guarded
def cmd_split(manifest_path, out_path, ratios, seed, balance):
    """Stratified subject-exclusive train/validation/test split."""
    manifest = load_manifest(manifest_path)
    assignment = split(manifest, ratios, seed)
    assignment.write(out_path)
    click.echo(assignment.counts(manifest).to_string())
    if balance:
        pd.concat([balance_table(manifest, assignment, 'subject'),
                   balance_table(manifest, assignment, 'image')], ignore_index=True
                  ).to_csv(balance, index=False, float_format='%.10g')


@cli.command('train')
@click.argument('manifest_path', type=click.Path(exists=True, dir_okay=False))
@click.argument('out_dir', type=click.Path(file_okay=False))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--split', 'split_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--rfi-manifest', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--seed', type=int, default=None)
@click.option('--epochs', type=int, default=None)
@with_threshold_options
@guarded
def cmd_train(manifest_path, out_dir, config_path, split_path, rfi_manifest, seed, epochs,
              variant, lower, upper, binarize, skeletonize):
    """Train one classifier on the train/validation partitions."""
    entry = _entry_from_flags(variant, lower, upper, binarize, skeletonize)
    config = _audit_config(config_path, **{'train.seed': seed, 'train.max_epochs': epochs})
    manifest = load_manifest(manifest_path)
    rfi = load_manifest(rfi_manifest) if rfi_manifest else None
    audit = LeakageAudit(manifest, config, rfi, _assignment(manifest, split_path, config))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    utils.write_json(config.model_dump(mode='json'), out_dir / 'effective_config.json')
    x_train, y_train, _, _ = audit.partition_inputs(entry, 'train')
    x_val, y_val, _, _ = audit.partition_inputs(entry, 'validation')
    params, report = train(x_train, y_train, x_val, y_val, config.train)
    save_checkpoint(params, out_dir / 'model.ckpt')
    report.write(out_dir / 'training.csv')
    audit.assignment.write(out_dir / 'split.csv')
    click.echo("best epoch %d (%s), checkpoint %s" % (report.best_epoch, report.stop_reason,
                                                       out_dir / 'model.ckpt'))


@cli.command('eval')
@click.argument('manifest_path', type=click.Path(exists=True, dir_okay=False))
@click.argument('checkpoint', type=click.Path(exists=True, dir_okay=False))
@click.argument('out_dir', type=click.Path(file_okay=False))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--split', 'split_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--partition', type=click.Choice(PARTITIONS), default='test', show_default=True)
@click.option('--rfi-manifest', type=click.Path(exists=True, dir_okay=False), default=None)
@with_threshold_options
@guarded
def cmd_eval(manifest_path, checkpoint, out_dir, config_path, split_path, partition, rfi_manifest,
             variant, lower, upper, binarize, skeletonize):
    """Score a checkpoint on one partition at image and subject level."""
    entry = _entry_from_flags(variant, lower, upper, binarize, skeletonize)
    params = load_checkpoint(checkpoint)
    config = _audit_config(config_path, **{'train.input_size': params.arch.input_size})
    manifest = load_manifest(manifest_path)
    rfi = load_manifest(rfi_manifest) if rfi_manifest else None
    audit = LeakageAudit(manifest, config, rfi, _assignment(manifest, split_path, config))

    x, labels, image_ids, subject_ids = audit.partition_inputs(entry, partition)
    preds = predict(params, x, image_ids, subject_ids, labels)
    reports = evaluate(preds)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    preds.write(out_dir / 'predictions.csv')
    pd.DataFrame([r.scalars() for r in reports]).to_csv(out_dir / 'metrics.csv', index=False,
                                                         float_format='%.10g')
    for r in reports:
        r.write(out_dir / ('metrics_%s.json' % r.level))
        r.frame().to_csv(out_dir / ('curve_%s.csv' % r.level), index=False, float_format='%.10g')
        if config.plots:
            utils.plot_curves(r, Path(checkpoint).stem, out_dir / ('curves_%s.svg' % r.level))
        click.echo("%-7s AUC-PR %.4f  AUC-ROC %.4f  prevalence %.4f"
                   % (r.level, r.auc_pr, r.auc_roc, r.prevalence))


@cli.command('audit')
@click.argument('manifest_path', type=click.Path(exists=True, dir_okay=False))
@click.argument('out_dir', type=click.Path(file_okay=False))
@click.option('--plan', 'plan_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Plan JSON; default is the full 40-entry ladder')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--rfi-manifest', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--seed', type=int, default=None, help='Training seed')
@click.option('--split-seed', type=int, default=None)
@click.option('--epochs', type=int, default=None)
@click.option('--input-size', type=int, default=None)
@click.option('--jobs', type=int, default=None, help='Ladder entries run concurrently')
@click.option('--no-plots', is_flag=True)
@guarded
def cmd_audit(manifest_path, out_dir, plan_path, config_path, rfi_manifest, seed, split_seed, epochs,
              input_size, jobs, no_plots):
    """Run the transform ladder end to end and write results.csv."""
    config = _audit_config(config_path, **{'train.seed': seed, 'split_seed': split_seed,
                                           'train.max_epochs': epochs, 'train.input_size': input_size,
                                           'jobs': jobs, 'plots': False if no_plots else None})
    manifest = load_manifest(manifest_path)
    rfi = load_manifest(rfi_manifest) if rfi_manifest else None
    plan = utils.load_model(AuditPlan, plan_path) if plan_path else default_plan(include_color=rfi is not None)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    utils.write_json(config.model_dump(mode='json'), out_dir / 'effective_config.json')
    utils.write_json(plan.model_dump(mode='json'), out_dir / 'plan.json')
    results, records, errors = LeakageAudit(manifest, config, rfi).run(plan, out_dir)
    click.echo("%d/%d entries completed, results in %s" % (len(records), len(plan.entries),
                                                           out_dir / 'results.csv'))
    for err in errors:
        click.echo("  %s failed: %s" % (err['entry'], err['message']), err=True)
    if not records:
        sys.exit(EXIT_RUNTIME)


@cli.command('stats')
@click.argument('manifest_path', type=click.Path(exists=True, dir_okay=False))
@click.argument('out_dir', type=click.Path(file_okay=False))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--rfi-manifest', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--split', 'split_path', type=click.Path(exists=True, dir_okay=False), default=None)
@guarded
def cmd_stats(manifest_path, out_dir, config_path, rfi_manifest, split_path):
    """Covariate balance, segmented-pixel counts and channel histograms."""
    config = _audit_config(config_path)
    manifest = load_manifest(manifest_path)
    rfi = load_manifest(rfi_manifest) if rfi_manifest else None
    audit = LeakageAudit(manifest, config, rfi, _assignment(manifest, split_path, config))
    audit.write_stats(out_dir)
    click.echo("statistics written to %s" % out_dir)


@cli.command('report')
@click.argument('results_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--level', type=click.Choice(['image', 'subject']), default='image', show_default=True)
@click.option('--band', type=float, default=CHANCE_BAND, show_default=True,
              help='AUC-PR distance from prevalence still read as chance')
@guarded
def cmd_report(results_path, level, band):
    """Tabulate results.csv and flag entries above chance."""
    results = pd.read_csv(results_path)
    missing = sorted(set(['entry', 'level', 'auc_pr', 'auc_roc', 'prevalence']) - set(results.columns))
    if missing:
        raise utils.ConfigError("%s lacks columns %s" % (results_path, missing))
    rows = results[results['level'] == level]
    for _, r in rows.iterrows():
        verdict = 'leak' if r['auc_pr'] > r['prevalence'] + band else 'chance'
        click.echo("%-24s AUC-PR %.3f  AUC-ROC %.3f  prevalence %.3f  %s"
                   % (r['entry'], r['auc_pr'], r['auc_roc'], r['prevalence'], verdict))


if __name__ == '__main__':
    cli()
