#!/usr/bin/env python3
"""
End-to-end leakage audit: one shared subject-exclusive split, then for every
plan entry transform -> train -> predict test -> score at image and subject level.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator
from scipy.stats import spearmanr
from tqdm import tqdm

import utils
from config import (CLAHE_DEFAULTS, DEFAULT_RATIOS, LADDER_THRESHOLDS, LOW_BAND, MID_BAND, PIXEL_COUNT_THRESHOLDS,
                    POSITIVE_GROUP)
from rvm_audit.cohort import PARTITIONS, Manifest, balance_table, load_manifest, pixel_count_stats, split
from rvm_audit.imagecore import MAXVAL, channel_histograms, clahe_color, read_color, read_gray
from rvm_audit.learner import TrainConfig, predict, save_checkpoint, train
from rvm_audit.metrics import MetricsReport, evaluate
from rvm_audit.transforms import VARIANTS, ThresholdSpec, apply_variant, bilinear

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ['entry', 'level', 'auc_pr', 'auc_roc', 'prevalence', 'n_pos', 'n_neg', 'seed']
COLOR_VARIANT = 'color'


class PlanEntry(BaseModel):
    name: str = Field(min_length=1, description="Unique report key")
    variant: Literal['grayscale', 'binarized', 'skeletonized', 'color']
    lower: int = Field(default=0, ge=0, le=256)
    upper: Optional[int] = Field(default=None, ge=0, le=255)

    @property
    def threshold(self) -> ThresholdSpec:
        return ThresholdSpec(lower=self.lower, upper=self.upper)


class AuditPlan(BaseModel):
    entries: List[PlanEntry] = Field(min_length=1, description="Ladder, run in this order")

    @field_validator('entries')
    @classmethod
    def _unique_names(cls, entries):
        names = [e.name for e in entries]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError("duplicate entry names: %s" % ', '.join(dupes))
        return entries

    @property
    def needs_color(self) -> bool:
        return any(e.variant == COLOR_VARIANT for e in self.entries)


def default_plan(include_color: bool = True) -> AuditPlan:
    """11 lower thresholds x 3 variants, the two bands x 3 variants, plus colour RFIs"""
    entries = []
    for variant in VARIANTS:
        for lower in LADDER_THRESHOLDS:
            entries.append(PlanEntry(name="%s_ge%d" % (variant, lower), variant=variant, lower=lower))
    for band in (LOW_BAND, MID_BAND):
        spec = ThresholdSpec(**band)
        for variant in VARIANTS:
            entries.append(PlanEntry(name="%s_%s" % (variant, spec.label), variant=variant, **band))
    if include_color:
        entries.append(PlanEntry(name='color_rfi', variant=COLOR_VARIANT))
    return AuditPlan(entries=entries)


class AuditConfig(BaseModel):
    train: TrainConfig = Field(default_factory=TrainConfig)
    ratios: Tuple[float, float, float] = Field(default=DEFAULT_RATIOS, description="train/validation/test")
    split_seed: int = Field(default=0)
    positive_group: str = Field(default=POSITIVE_GROUP, description="Group scored as label 1")
    color_clahe: bool = Field(default=True, description="CLAHE-preprocess fundus images")
    jobs: int = Field(default=1, ge=1, description="Ladder entries run concurrently")
    plots: bool = Field(default=True, description="Write SVG figures")


class RunRecord(BaseModel):
    entry: str
    seed: int
    checkpoint: Optional[str] = None
    image: MetricsReport
    subject: MetricsReport

    def rows(self) -> List[dict]:
        return [dict(entry=self.entry, seed=self.seed, **report.scalars())
                for report in (self.image, self.subject)]


class LeakageAudit:
    def __init__(self, manifest: Manifest, config: Optional[AuditConfig] = None,
                 rfi_manifest: Optional[Manifest] = None, assignment=None):
        self.manifest = manifest
        self.config = config or AuditConfig()
        self.rfi_manifest = rfi_manifest
        self.assignment = assignment or split(manifest, self.config.ratios, self.config.split_seed)
        self.assignment.check_covers(manifest)
        self.images = manifest.frame()
        self.images['partition'] = self.images['subject_id'].map(self.assignment.mapping)
        self.images['label'] = (self.images['group'] == self.config.positive_group).astype(np.int64)
        if self.images['label'].nunique() < 2:
            raise ValueError("positive group %r does not split the manifest into two classes"
                             % self.config.positive_group)
        self._paths = dict(zip(self.images['image_id'], self.images['image_path']))
        self._raw = {}
        logger.info("-----")
        logger.info("Audit over %s, split %s", manifest,
                    {p: len(self.assignment.subjects(p)) for p in PARTITIONS})
        logger.info("-----")

    # ------------------------------------------------------------------
    # inputs
    # ------------------------------------------------------------------

    def raw_image(self, image_id):
        if image_id not in self._raw:
            self._raw[image_id] = read_gray(self.manifest.resolve(self._paths[image_id]))
        return self._raw[image_id]

    def _color_paths(self):
        if self.rfi_manifest is None:
            raise ValueError("colour entry requested but no fundus manifest was given")
        frame = self.rfi_manifest.frame().set_index('image_id')
        missing = sorted(set(self.images['image_id']) - set(frame.index))
        if missing:
            raise ValueError("fundus manifest lacks %d image(s), e.g. %s" % (len(missing), missing[0]))
        return frame['image_path']

    def partition_inputs(self, entry: PlanEntry, partition: str):
        """(x, labels, image_ids, subject_ids) for one partition, x scaled to [0, 1]"""
        size = self.config.train.input_size
        rows = self.images[self.images['partition'] == partition]
        arrays = []
        if entry.variant == COLOR_VARIANT:
            paths = self._color_paths()
            for image_id in rows['image_id']:
                img = read_color(self.rfi_manifest.resolve(paths[image_id]))
                if self.config.color_clahe:
                    img = clahe_color(img, **CLAHE_DEFAULTS)
                arrays.append(bilinear(img.planes(), size, size))
        else:
            spec = entry.threshold
            for image_id in rows['image_id']:
                img = apply_variant(self.raw_image(image_id), entry.variant, spec)
                arrays.append(bilinear(img.pixels, size, size)[None])
        x = np.stack(arrays) / MAXVAL if arrays else np.zeros((0, 1, size, size))
        return x, rows['label'].to_numpy(), rows['image_id'].tolist(), rows['subject_id'].tolist()

    # ------------------------------------------------------------------
    # ladder
    # ------------------------------------------------------------------

    def run_entry(self, entry: PlanEntry, out_dir: Optional[Path] = None) -> RunRecord:
        x_train, y_train, _, _ = self.partition_inputs(entry, 'train')
        x_val, y_val, _, _ = self.partition_inputs(entry, 'validation')
        x_test, y_test, test_ids, test_subjects = self.partition_inputs(entry, 'test')
        params, report = train(x_train, y_train, x_val, y_val, self.config.train)
        preds = predict(params, x_test, test_ids, test_subjects, y_test)
        image_report, subject_report = evaluate(preds)

        checkpoint = None
        if out_dir is not None:
            entry_dir = out_dir / 'entries' / entry.name
            entry_dir.mkdir(parents=True, exist_ok=True)
            checkpoint = entry_dir / 'model.ckpt'
            save_checkpoint(params, checkpoint)
            report.write(entry_dir / 'training.csv')
            preds.write(entry_dir / 'predictions.csv')
            for r in (image_report, subject_report):
                r.write(entry_dir / ('metrics_%s.json' % r.level))
                r.frame().to_csv(entry_dir / ('curve_%s.csv' % r.level), index=False, float_format='%.10g')
            if self.config.plots:
                utils.plot_curves(image_report, entry.name, entry_dir / 'curves_image.svg')
                utils.plot_curves(subject_report, entry.name, entry_dir / 'curves_subject.svg')
        logger.info("%s: image AUC-PR %.3f AUC-ROC %.3f | subject AUC-PR %.3f AUC-ROC %.3f",
                    entry.name, image_report.auc_pr, image_report.auc_roc,
                    subject_report.auc_pr, subject_report.auc_roc)
        return RunRecord(entry=entry.name, seed=self.config.train.seed,
                         checkpoint=checkpoint.relative_to(out_dir).as_posix() if checkpoint else None,
                         image=image_report, subject=subject_report)

    def _guarded(self, entry, out_dir):
        try:
            return self.run_entry(entry, out_dir), None
        except Exception as e:
            logger.error("entry %s failed: %s", entry.name, e)
            return None, {'entry': entry.name, 'error': type(e).__name__, 'message': str(e)}

    def run(self, plan: Optional[AuditPlan] = None, out_dir=None):
        """Run every entry; returns (results frame, records, errors)

        A failing entry is logged and listed in errors; the others proceed.
        """
        plan = plan or default_plan(include_color=self.rfi_manifest is not None)
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            self.assignment.write(out_dir / 'split.csv')

        with ThreadPoolExecutor(max_workers=self.config.jobs) as pool:
            outcomes = list(tqdm(pool.map(lambda e: self._guarded(e, out_dir), plan.entries),
                                 total=len(plan.entries), desc='audit', disable=None))
        records = [r for r, _ in outcomes if r is not None]
        errors = [err for _, err in outcomes if err is not None]

        results = pd.DataFrame([row for r in records for row in r.rows()], columns=RESULT_COLUMNS)
        if out_dir is not None:
            results.to_csv(out_dir / 'results.csv', index=False, float_format='%.10g')
            trend = self.threshold_trend(plan, records)
            summary = {
                'n_entries': len(plan.entries),
                'n_completed': len(records),
                'errors': errors,
                'split': {p: len(self.assignment.subjects(p)) for p in PARTITIONS},
                'trend': trend,
                'records': [r.model_dump(include={'entry', 'seed', 'checkpoint'}) for r in records],
            }
            utils.write_json(summary, out_dir / 'summary.json')
            if self.config.plots and records:
                self._plot_trend(plan, records, out_dir / 'threshold_trend.svg')
        return results, records, errors

    @staticmethod
    def _ladder_frame(plan: AuditPlan, records: List[RunRecord]) -> pd.DataFrame:
        by_name = {r.entry: r for r in records}
        rows = [{'variant': e.variant, 'lower': e.lower, 'auc_pr': by_name[e.name].image.auc_pr,
                 'prevalence': by_name[e.name].image.prevalence}
                for e in plan.entries
                if e.name in by_name and e.upper is None and e.variant != COLOR_VARIANT]
        return pd.DataFrame(rows, columns=['variant', 'lower', 'auc_pr', 'prevalence'])

    def threshold_trend(self, plan: AuditPlan, records: List[RunRecord]) -> dict:
        """Spearman rho between lower threshold and mean image-level AUC-PR"""
        ladder = self._ladder_frame(plan, records)
        means = ladder.groupby('lower')['auc_pr'].mean()
        if len(means) < 3 or means.nunique() < 2:
            return {'rho': None, 'p': None, 'n_thresholds': int(len(means))}
        res = spearmanr(means.index.to_numpy(), means.to_numpy())
        return {'rho': float(res.statistic), 'p': float(res.pvalue), 'n_thresholds': int(len(means))}

    def _plot_trend(self, plan, records, path):
        ladder = self._ladder_frame(plan, records)
        if ladder.empty:
            return
        utils.plot_threshold_trend(ladder, path, prevalence=float(ladder['prevalence'].iloc[0]))

    # ------------------------------------------------------------------
    # descriptive statistics
    # ------------------------------------------------------------------

    def covariate_balance(self) -> pd.DataFrame:
        return pd.concat([balance_table(self.manifest, self.assignment, granularity='subject'),
                          balance_table(self.manifest, self.assignment, granularity='image')],
                         ignore_index=True)

    def pixel_counts(self, partition: str = 'train'):
        """{(variant, lower): PixelCountStats} over one partition"""
        rows = self.images[self.images['partition'] == partition]
        out = {}
        for variant in ('grayscale', 'skeletonized'):
            for lower in PIXEL_COUNT_THRESHOLDS:
                spec = ThresholdSpec(lower=lower)
                out[(variant, lower)] = pixel_count_stats(
                    (group, apply_variant(self.raw_image(image_id), variant, spec))
                    for image_id, group in zip(rows['image_id'], rows['group']))
        return out

    def channel_report(self, partition: str = 'train'):
        paths = self._color_paths()
        rows = self.images[self.images['partition'] == partition]
        histograms = []
        for group, part in rows.groupby('group', sort=True):
            images = (read_color(self.rfi_manifest.resolve(paths[i])) for i in part['image_id'])
            histograms.extend(channel_histograms(images, group))
        return histograms

    def write_stats(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.covariate_balance().to_csv(out_dir / 'balance.csv', index=False, float_format='%.10g')

        counts = self.pixel_counts()
        summary = pd.concat([stats.summary.reset_index().assign(variant=v, lower=t)
                             for (v, t), stats in counts.items()], ignore_index=True)
        summary.to_csv(out_dir / 'pixel_counts.csv', index=False, float_format='%.10g')
        if self.config.plots:
            utils.plot_pixel_counts({"%s, PIV >= %d" % key: stats for key, stats in counts.items()},
                                    out_dir / 'pixel_counts.svg')

        if self.rfi_manifest is not None:
            histograms = self.channel_report()
            pd.DataFrame([{'group': h.group_label, 'channel': h.channel, 'piv': v, 'count': int(c)}
                          for h in histograms for v, c in enumerate(h.bin_counts)]
                         ).to_csv(out_dir / 'channel_histograms.csv', index=False)
            if self.config.plots:
                utils.plot_channel_histograms(histograms, out_dir / 'channel_histograms.svg')
        logger.info("wrote descriptive statistics to %s", out_dir)


def run_audit(manifest_path, out_dir, plan=None, config=None, rfi_manifest_path=None):
    """Load the manifests and run the full ladder"""
    manifest = load_manifest(manifest_path)
    rfi = load_manifest(rfi_manifest_path) if rfi_manifest_path else None
    audit = LeakageAudit(manifest, config, rfi)
    return audit.run(plan, out_dir)
