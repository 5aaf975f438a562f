"""Manifest ingestion, subject-exclusive stratified partitioning, Welch tests and
pixel-count statistics.

Manifest CSV columns: subject_id,group,bw_g,ga_wk,pma_wk,image_path (one row per
image).  Image paths are resolved relative to the manifest's directory.
"""
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy import special

from config import DEFAULT_RATIOS, GROUP_LABELS
from rvm_audit.imagecore import GrayImage
from utils import format_validation_error

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ['subject_id', 'group', 'bw_g', 'ga_wk', 'pma_wk', 'image_path']
COVARIATES = {'bw_g': 'Birth weight (g)', 'ga_wk': 'Gestational age (wk)',
              'pma_wk': 'Postmenstrual age (wk)'}
PARTITIONS = ('train', 'validation', 'test')


class ManifestError(ValueError):
    pass


class ConflictingCovariateError(ManifestError):
    pass


class UnknownGroupError(ManifestError):
    pass


class MissingColumnError(ManifestError):
    pass


class EmptyManifestError(ManifestError):
    pass


class InvalidCovariateError(ManifestError):
    pass


class SplitError(ValueError):
    pass


class SampleSizeError(ValueError):
    pass


class SubjectRecord(BaseModel):
    subject_id: str = Field(min_length=1, description="Opaque subject identifier")
    group: str = Field(description="Protected attribute label")
    bw: float = Field(gt=0, description="Birth weight in grams")
    ga: float = Field(gt=0, description="Gestational age in weeks")
    pma: float = Field(description="Postmenstrual age in weeks")
    image_paths: List[str] = Field(min_length=1, description="Image files of this subject")

    @model_validator(mode='after')
    def _pma_after_ga(self):
        if self.pma < self.ga:
            raise ValueError("pma (%s) must not be below ga (%s)" % (self.pma, self.ga))
        return self


class Manifest:
    """Subjects keyed by id, in first-appearance order"""

    def __init__(self, subjects: Iterable[SubjectRecord], root: Optional[Path] = None):
        self.subjects: Dict[str, SubjectRecord] = {}
        for s in subjects:
            if s.subject_id in self.subjects:
                raise ManifestError("duplicate subject_id %s" % s.subject_id)
            self.subjects[s.subject_id] = s
        self.root = Path(root) if root is not None else Path('.')

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_images(self) -> int:
        return sum(len(s.image_paths) for s in self.subjects.values())

    @property
    def groups(self) -> List[str]:
        return sorted({s.group for s in self.subjects.values()})

    def resolve(self, image_path: str) -> Path:
        p = Path(image_path)
        return p if p.is_absolute() else self.root / p

    def frame(self) -> pd.DataFrame:
        """One row per image, with an image_id unique within the manifest"""
        rows = []
        for s in self.subjects.values():
            for k, path in enumerate(s.image_paths):
                rows.append({'image_id': "%s/%d" % (s.subject_id, k), 'subject_id': s.subject_id,
                             'group': s.group, 'bw_g': s.bw, 'ga_wk': s.ga, 'pma_wk': s.pma,
                             'image_path': path})
        return pd.DataFrame(rows, columns=['image_id'] + MANIFEST_COLUMNS)

    def write(self, path) -> None:
        self.frame()[MANIFEST_COLUMNS].to_csv(path, index=False)

    def __repr__(self):
        return "Manifest(%d subjects, %d images)" % (self.n_subjects, self.n_images)


def load_manifest(path, groups: Sequence[str] = GROUP_LABELS) -> Manifest:
    path = Path(path)
    df = pd.read_csv(path, dtype={'subject_id': str, 'group': str, 'image_path': str})
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise MissingColumnError("manifest %s lacks columns: %s" % (path, ', '.join(missing)))
    if df.empty:
        raise EmptyManifestError("manifest %s has no rows" % path)

    unknown = sorted(set(df['group']) - set(groups))
    if unknown:
        raise UnknownGroupError("unknown group label(s) %s; expected one of %s"
                                % (unknown, list(groups)))

    subjects = []
    for subject_id, rows in df.groupby('subject_id', sort=False):
        for column in ('group', 'bw_g', 'ga_wk', 'pma_wk'):
            if rows[column].nunique() > 1:
                raise ConflictingCovariateError(
                    "subject %s has conflicting %s values: %s"
                    % (subject_id, column, sorted(rows[column].unique().tolist())))
        first = rows.iloc[0]
        try:
            record = SubjectRecord(subject_id=str(subject_id), group=str(first['group']),
                                   bw=float(first['bw_g']), ga=float(first['ga_wk']),
                                   pma=float(first['pma_wk']),
                                   image_paths=[str(p) for p in rows['image_path']])
        except ValidationError as e:
            raise InvalidCovariateError("subject %s: %s"
                                        % (subject_id, format_validation_error(e, 'covariates')))
        subjects.append(record)
    manifest = Manifest(subjects, root=path.parent)
    logger.info("loaded %s from %s", manifest, path)
    return manifest


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

class SplitAssignment:
    def __init__(self, mapping: Dict[str, str], ratios: Tuple[float, float, float], seed: int):
        bad = {p for p in mapping.values() if p not in PARTITIONS}
        if bad:
            raise SplitError("unknown partition(s) %s" % sorted(bad))
        self.mapping = dict(mapping)
        self.ratios = tuple(ratios)
        self.seed = seed

    def subjects(self, partition: str) -> List[str]:
        return [s for s, p in self.mapping.items() if p == partition]

    def counts(self, manifest: Manifest) -> pd.DataFrame:
        """Subjects per (group, partition)"""
        rows = [{'group': manifest.subjects[s].group, 'partition': p} for s, p in self.mapping.items()]
        return (pd.DataFrame(rows).groupby(['group', 'partition']).size()
                .unstack(fill_value=0).reindex(columns=list(PARTITIONS), fill_value=0))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({'subject_id': list(self.mapping), 'partition': list(self.mapping.values())})

    def write(self, path) -> None:
        self.frame().to_csv(path, index=False)

    @classmethod
    def read(cls, path, ratios=DEFAULT_RATIOS, seed: int = -1):
        df = pd.read_csv(path, dtype={'subject_id': str, 'partition': str})
        if df['subject_id'].duplicated().any():
            raise SplitError("split file %s assigns a subject twice" % path)
        return cls(dict(zip(df['subject_id'], df['partition'])), ratios, seed)

    def check_covers(self, manifest: Manifest) -> None:
        """Every manifest subject assigned exactly once, and nothing else"""
        unassigned = [s for s in manifest.subjects if s not in self.mapping]
        unknown = [s for s in self.mapping if s not in manifest.subjects]
        if unassigned:
            raise SplitError("%d manifest subject(s) have no partition, e.g. %s"
                             % (len(unassigned), unassigned[:5]))
        if unknown:
            raise SplitError("split names %d subject(s) absent from the manifest, e.g. %s"
                             % (len(unknown), unknown[:5]))

    def __eq__(self, other):
        return isinstance(other, SplitAssignment) and self.mapping == other.mapping


def _largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
    exact = [n * r for r in ratios]
    sizes = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in order[:n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split(manifest: Manifest, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    """Stratified subject-exclusive split

    Within every group the subjects (sorted by id, then shuffled by the seeded
    generator) are cut into partition sizes given by largest-remainder rounding
    of group_count * ratio.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(PARTITIONS) or min(ratios) <= 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise SplitError("ratios must be three positive fractions summing to 1, got %s" % (ratios,))

    rng = np.random.default_rng(seed)
    mapping = {}
    for group in manifest.groups:
        members = sorted(s.subject_id for s in manifest.subjects.values() if s.group == group)
        if len(members) < len(PARTITIONS):
            raise SplitError("group %s has %d subjects, fewer than the %d partitions"
                             % (group, len(members), len(PARTITIONS)))
        members = [members[k] for k in rng.permutation(len(members))]
        sizes = _largest_remainder(len(members), ratios)
        start = 0
        for partition, size in zip(PARTITIONS, sizes):
            for subject_id in members[start:start + size]:
                mapping[subject_id] = partition
            start += size
        logger.debug("split %s: %s", group, dict(zip(PARTITIONS, sizes)))
    # manifest order, independent of group iteration
    mapping = {s: mapping[s] for s in manifest.subjects}
    return SplitAssignment(mapping, ratios, seed)


# ---------------------------------------------------------------------------
# Welch's t-test
# ---------------------------------------------------------------------------

class WelchResult(BaseModel):
    t: float = Field(description="Welch t statistic")
    df: float = Field(gt=0, description="Welch-Satterthwaite degrees of freedom")
    p: float = Field(ge=0, le=1, description="Two-sided p-value")


def student_t_two_sided(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return min(1.0, max(0.0, float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))))


def welch_t(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise SampleSizeError("Welch's test needs at least 2 values per sample, got %d and %d"
                              % (a.size, b.size))
    na, nb = a.size, b.size
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    sa, sb = va / na, vb / nb
    if sa + sb == 0:
        # both samples constant
        if ma == mb:
            return WelchResult(t=0.0, df=na + nb - 2, p=1.0)
        return WelchResult(t=math.copysign(math.inf, ma - mb), df=na + nb - 2, p=0.0)
    t = (ma - mb) / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa ** 2 / (na - 1) + sb ** 2 / (nb - 1))
    return WelchResult(t=t, df=df, p=student_t_two_sided(t, df))


def balance_table(manifest: Manifest, assignment: Optional[SplitAssignment] = None,
                  granularity: str = 'subject') -> pd.DataFrame:
    """Covariate balance between the two groups, per partition and over all data

    granularity 'subject' uses one value per subject; 'image' repeats a subject's
    covariates once per image.
    """
    if granularity not in ('subject', 'image'):
        raise ValueError("granularity must be 'subject' or 'image'")
    groups = manifest.groups
    if len(groups) != 2:
        raise ValueError("balance table compares exactly two groups, found %s" % groups)
    frame = manifest.frame()
    frame['partition'] = frame['subject_id'].map(assignment.mapping) if assignment else 'all'
    if granularity == 'subject':
        frame = frame.drop_duplicates('subject_id')

    scopes = [(p, frame[frame['partition'] == p]) for p in PARTITIONS] if assignment else []
    scopes.append(('all', frame))
    rows = []
    for scope, part in scopes:
        if part.empty:
            continue
        for column, label in COVARIATES.items():
            samples = [part.loc[part['group'] == g, column].to_numpy() for g in groups]
            row = {'partition': scope, 'covariate': label, 'granularity': granularity}
            for g, values in zip(groups, samples):
                row['%s_mean' % g] = values.mean() if values.size else float('nan')
                row['%s_sd' % g] = values.std(ddof=1) if values.size > 1 else float('nan')
                row['%s_n' % g] = values.size
            try:
                res = welch_t(*samples)
                row.update({'t': res.t, 'df': res.df, 'p': res.p})
            except SampleSizeError as e:
                logger.warning("skipping Welch test for %s/%s: %s", scope, label, e)
                row.update({'t': float('nan'), 'df': float('nan'), 'p': float('nan')})
            rows.append(row)
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# pixel counts
# ---------------------------------------------------------------------------

class PixelCountStats:
    """Non-zero pixel counts per image, summarised by group"""

    def __init__(self, counts: pd.DataFrame, bins: int = 20):
        self.counts = counts
        self.summary = (counts.groupby('group')['nnz']
                        .agg(n='size', mean='mean', sd='std', min='min', max='max'))
        edges = np.histogram_bin_edges(counts['nnz'].to_numpy(), bins=bins)
        self.bin_edges = edges
        self.histograms = {g: np.histogram(part['nnz'].to_numpy(), bins=edges)[0]
                           for g, part in counts.groupby('group')}

    def histogram_frame(self) -> pd.DataFrame:
        rows = []
        for g, hist in self.histograms.items():
            for k, count in enumerate(hist):
                rows.append({'group': g, 'bin_lo': self.bin_edges[k], 'bin_hi': self.bin_edges[k + 1],
                             'count': int(count)})
        return pd.DataFrame(rows)


def pixel_count_stats(images: Iterable[Tuple[str, GrayImage]], bins: int = 20) -> PixelCountStats:
    """images: (group label, image) pairs"""
    rows = [{'group': label, 'nnz': img.nnz(), 'pixels': img.width * img.height}
            for label, img in images]
    if not rows:
        raise ValueError("pixel_count_stats needs at least one image")
    return PixelCountStats(pd.DataFrame(rows), bins=bins)
