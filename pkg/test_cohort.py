#!/usr/bin/env python3
"""
Tests for manifest loading, subject-exclusive splitting, Welch's test,
covariate balance and pixel-count statistics.
"""

import math

import numpy as np
import pandas as pd
import pytest
from scipy import integrate, special

from config import DEFAULT_RATIOS
from rvm_audit.cohort import (PARTITIONS, ConflictingCovariateError, EmptyManifestError, InvalidCovariateError,
                              Manifest, MissingColumnError, SampleSizeError, SplitAssignment, SplitError,
                              SubjectRecord, UnknownGroupError, balance_table, load_manifest, pixel_count_stats,
                              split, student_t_two_sided, welch_t)
from rvm_audit.imagecore import GrayImage
from rvm_audit.transforms import ThresholdSpec, binarize, threshold


def write_manifest(path, rows):
    pd.DataFrame(rows, columns=['subject_id', 'group', 'bw_g', 'ga_wk', 'pma_wk', 'image_path']).to_csv(
        path, index=False)
    return path


def make_manifest(counts, images_per_subject=1, seed=0):
    """In-memory manifest with counts = {group: n_subjects}"""
    rng = np.random.default_rng(seed)
    subjects = []
    for group, n in counts.items():
        for k in range(n):
            ga = float(rng.uniform(24, 30))
            subjects.append(SubjectRecord(subject_id="%s%03d" % (group[0], k), group=group,
                                          bw=float(rng.uniform(600, 1400)), ga=ga, pma=ga + 6.0,
                                          image_paths=["img_%s_%d_%d.pgm" % (group, k, i)
                                                       for i in range(images_per_subject)]))
    return Manifest(subjects)


def t_oracle(t, df):
    """Two-sided p by quadrature of the Student-t density"""
    log_norm = special.gammaln((df + 1) / 2) - special.gammaln(df / 2) - 0.5 * math.log(df * math.pi)

    def density(x):
        return math.exp(log_norm - (df + 1) / 2 * math.log1p(x * x / df))

    tail, _ = integrate.quad(density, abs(t), np.inf, epsabs=1e-14, epsrel=1e-12, limit=200)
    return min(1.0, 2 * tail)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def test_rows_group_into_subjects(tmp_path):
    path = write_manifest(tmp_path / 'm.csv', [
        ['s1', 'Black', 900, 26.0, 34.0, 'a.pgm'],
        ['s1', 'Black', 900, 26.0, 34.0, 'b.pgm'],
        ['s2', 'White', 1100, 28.0, 35.0, 'c.pgm'],
    ])
    manifest = load_manifest(path)
    assert manifest.n_subjects == 2 and manifest.n_images == 3
    assert manifest.subjects['s1'].image_paths == ['a.pgm', 'b.pgm']
    assert manifest.resolve('a.pgm') == tmp_path / 'a.pgm'


def test_conflicting_covariates(tmp_path):
    path = write_manifest(tmp_path / 'm.csv', [
        ['s1', 'Black', 900, 26.0, 34.0, 'a.pgm'],
        ['s1', 'Black', 950, 26.0, 34.0, 'b.pgm'],
    ])
    with pytest.raises(ConflictingCovariateError):
        load_manifest(path)


def test_unknown_group(tmp_path):
    path = write_manifest(tmp_path / 'm.csv', [['s1', 'Green', 900, 26.0, 34.0, 'a.pgm']])
    with pytest.raises(UnknownGroupError):
        load_manifest(path)


def test_missing_column_and_empty(tmp_path):
    path = tmp_path / 'm.csv'
    path.write_text('subject_id,group,bw_g,ga_wk,pma_wk\ns1,Black,900,26,34\n')
    with pytest.raises(MissingColumnError):
        load_manifest(path)
    path.write_text('subject_id,group,bw_g,ga_wk,pma_wk,image_path\n')
    with pytest.raises(EmptyManifestError):
        load_manifest(path)


def test_invalid_covariates_name_the_subject(tmp_path):
    path = write_manifest(tmp_path / 'm.csv', [
        ['s1', 'Black', 900, 26.0, 34.0, 'a.pgm'],
        ['s2', 'White', 1100, 30.0, 29.0, 'b.pgm'],
    ])
    with pytest.raises(InvalidCovariateError, match='s2'):
        load_manifest(path)
    write_manifest(path, [['s3', 'White', 0, 30.0, 31.0, 'b.pgm']])
    with pytest.raises(InvalidCovariateError, match='s3'):
        load_manifest(path)


def test_subject_record_invariants():
    with pytest.raises(ValueError):
        SubjectRecord(subject_id='s', group='Black', bw=900, ga=30, pma=29, image_paths=['a'])
    with pytest.raises(ValueError):
        SubjectRecord(subject_id='', group='Black', bw=900, ga=30, pma=31, image_paths=['a'])
    with pytest.raises(ValueError):
        SubjectRecord(subject_id='s', group='Black', bw=900, ga=30, pma=31, image_paths=[])


def test_manifest_of_study_size(tmp_path):
    rows = []
    n_images = 0
    for k in range(245):
        group = 'Black' if k < 94 else 'White'
        per_subject = 17 if k < 175 else 16
        for i in range(per_subject):
            rows.append(['s%03d' % k, group, 1000, 27.0, 35.0, 'i%d_%d.pgm' % (k, i)])
            n_images += 1
    rows.extend(rows[-1:] * (4095 - n_images))
    manifest = load_manifest(write_manifest(tmp_path / 'm.csv', rows))
    assert manifest.n_subjects == 245
    assert manifest.n_images == 4095


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------

def test_split_exact_sizes_single_group():
    manifest = make_manifest({'Black': 10})
    assignment = split(manifest, (0.5, 0.2, 0.3), seed=1)
    assert [len(assignment.subjects(p)) for p in PARTITIONS] == [5, 2, 3]


def test_split_study_sizes_within_one():
    manifest = make_manifest({'Black': 94, 'White': 151})
    assignment = split(manifest, DEFAULT_RATIOS, seed=0)
    counts = assignment.counts(manifest)
    for group, n in (('Black', 94), ('White', 151)):
        for partition, ratio in zip(PARTITIONS, DEFAULT_RATIOS):
            assert abs(counts.loc[group, partition] - n * ratio) < 1


def test_split_disjoint_cover_and_deterministic():
    manifest = make_manifest({'Black': 23, 'White': 31}, images_per_subject=3)
    a = split(manifest, DEFAULT_RATIOS, seed=5)
    b = split(manifest, DEFAULT_RATIOS, seed=5)
    assert a == b
    assert set(a.mapping) == set(manifest.subjects)
    assert sum(len(a.subjects(p)) for p in PARTITIONS) == manifest.n_subjects
    assert split(manifest, DEFAULT_RATIOS, seed=6) != a


def test_split_file_round_trip(tmp_path):
    manifest = make_manifest({'Black': 8, 'White': 9})
    a = split(manifest, DEFAULT_RATIOS, seed=2)
    a.write(tmp_path / 'split.csv')
    assert SplitAssignment.read(tmp_path / 'split.csv') == a


def test_split_file_must_cover_manifest(tmp_path):
    manifest = make_manifest({'Black': 4, 'White': 4})
    full = split(manifest, DEFAULT_RATIOS, seed=1)
    full.check_covers(manifest)

    partial = full.frame().iloc[:6]
    partial.to_csv(tmp_path / 'partial.csv', index=False)
    with pytest.raises(SplitError, match='no partition'):
        SplitAssignment.read(tmp_path / 'partial.csv').check_covers(manifest)

    extra = pd.concat([full.frame(), pd.DataFrame({'subject_id': ['X999'], 'partition': ['test']})])
    extra.to_csv(tmp_path / 'extra.csv', index=False)
    with pytest.raises(SplitError, match='absent'):
        SplitAssignment.read(tmp_path / 'extra.csv').check_covers(manifest)


def test_split_errors():
    with pytest.raises(SplitError):
        split(make_manifest({'Black': 2, 'White': 10}), DEFAULT_RATIOS)
    with pytest.raises(SplitError):
        split(make_manifest({'Black': 10}), (0.5, 0.5, 0.5))
    with pytest.raises(SplitError):
        split(make_manifest({'Black': 10}), (1.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# Welch
# ---------------------------------------------------------------------------

def test_welch_identical_samples():
    res = welch_t([1.0, 2.0, 4.0], [1.0, 2.0, 4.0])
    assert res.t == 0.0 and res.p == 1.0


def test_welch_small_example_against_quadrature():
    res = welch_t([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert res.t == pytest.approx(-1.0, abs=1e-12)
    assert res.df == pytest.approx(8.0, abs=1e-12)
    assert res.p == pytest.approx(t_oracle(res.t, res.df), abs=1e-6)


def test_welch_random_samples_against_quadrature():
    rng = np.random.default_rng(12)
    for _ in range(200):
        a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 3), size=rng.integers(2, 51))
        b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 3), size=rng.integers(2, 51))
        res = welch_t(a, b)
        assert 0 <= res.p <= 1 and res.df > 0
        assert res.p == pytest.approx(t_oracle(res.t, res.df), abs=1e-6)
        flipped = welch_t(b, a)
        assert flipped.t == -res.t
        assert flipped.p == res.p
        shifted = welch_t(a + 10.0, b + 10.0)
        assert shifted.t == pytest.approx(res.t, rel=1e-9, abs=1e-12)
        scaled = welch_t(a * 4.0, b * 4.0)
        assert scaled.p == pytest.approx(res.p, abs=1e-12)


def test_two_sided_tail_against_quadrature():
    assert student_t_two_sided(0.0, 5.0) == 1.0
    assert student_t_two_sided(math.inf, 5.0) == 0.0
    for df in (1.0, 2.5, 8.0, 47.3, 300.0):
        for t in (0.1, 1.0, 2.0, 4.5, -3.2):
            assert student_t_two_sided(t, df) == pytest.approx(t_oracle(t, df), abs=1e-8)


def test_welch_degenerate_conventions():
    assert welch_t([3, 3], [3, 3, 3]).p == 1.0
    res = welch_t([3, 3], [4, 4])
    assert res.p == 0.0 and res.t == -math.inf
    with pytest.raises(SampleSizeError):
        welch_t([1.0], [1.0, 2.0])


# ---------------------------------------------------------------------------
# balance / pixel counts
# ---------------------------------------------------------------------------

def test_balance_table_structure():
    manifest = make_manifest({'Black': 12, 'White': 15}, images_per_subject=2)
    assignment = split(manifest, DEFAULT_RATIOS, seed=0)
    table = balance_table(manifest, assignment, granularity='subject')
    assert set(table['partition']) == set(PARTITIONS) | {'all'}
    assert len(table) == 4 * 3
    overall = table[table['partition'] == 'all']
    assert (overall['Black_n'] == 12).all() and (overall['White_n'] == 15).all()
    assert table['p'].between(0, 1).all()

    per_image = balance_table(manifest, assignment, granularity='image')
    assert (per_image[per_image['partition'] == 'all']['Black_n'] == 24).all()


def test_pixel_count_stats():
    zero = GrayImage.zeros(4, 4)
    rng = np.random.default_rng(3)
    noisy = GrayImage(rng.integers(0, 256, size=(4, 4)))
    spec = ThresholdSpec(lower=100)
    stats = pixel_count_stats([('A', zero), ('A', binarize(threshold(noisy, spec))), ('B', noisy)])
    counts = stats.counts['nnz'].tolist()
    assert counts[0] == 0
    assert counts[1] == threshold(noisy, spec).nnz()
    assert stats.summary['n'].sum() == 3
    assert sum(h.sum() for h in stats.histograms.values()) == 3
    assert (stats.counts['nnz'] <= stats.counts['pixels']).all()
    with pytest.raises(ValueError):
        pixel_count_stats([])
