#!/usr/bin/env python3
"""
Tests for the synthetic cohort generator: vessel trees, vessel-map and fundus
rendering with planted group signals, and the on-disk cohort.
"""

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import ks_2samp

from rvm_audit.cohort import load_manifest, welch_t
from rvm_audit.imagecore import read_color, read_gray
from rvm_audit.synth import (CohortSpec, TreeParams, VesselTree, confidence_at, gen_cohort, gen_tree, render_rfi,
                             render_rvm, subject_table)

SMALL = (128, 96)


def small_spec(**kw):
    base = dict(image_size=SMALL, noise=0.0, n_subjects=(2, 2), images_per_subject=(1, 1))
    base.update(kw)
    return CohortSpec(**base)


def tree_for(spec, seed=0):
    return gen_tree(spec.tree_params(spec.groups[1]), seed)


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------

def test_no_branching_gives_single_segment():
    tree = gen_tree(TreeParams(expected_branches=0), 5)
    assert len(tree) == 1
    assert tree.segments[0].parent is None


def test_tree_structure():
    params = TreeParams(expected_branches=12, canvas=SMALL)
    tree = gen_tree(params, 1)
    assert len(tree) % 2 == 1
    w, h = SMALL
    for k, seg in enumerate(tree.segments):
        assert seg.width >= 1
        assert seg.confidence == confidence_at(seg.depth)
        assert (seg.points[:, 0] >= 0).all() and (seg.points[:, 0] <= w - 1).all()
        assert (seg.points[:, 1] >= 0).all() and (seg.points[:, 1] <= h - 1).all()
        if k:
            parent = tree.segments[seg.parent]
            assert seg.depth == parent.depth + 1
            assert np.array_equal(seg.points[0], parent.points[-1])


def test_tree_deterministic():
    params = TreeParams()
    a = gen_tree(params, 42)
    b = gen_tree(params, 42)
    assert len(a) == len(b)
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a.segments, b.segments))


def test_branch_count_scales_with_expected_events():
    def mean_segments(b):
        params = TreeParams(expected_branches=b, max_depth=30, segment_steps=2)
        return np.mean([len(gen_tree(params, s)) for s in range(300)])

    ratio = mean_segments(12) / mean_segments(6)
    # (1 + 2 * 12) / (1 + 2 * 6)
    assert 1.75 < ratio < 2.1


def test_tree_rejects_detached_child():
    tree = gen_tree(TreeParams(expected_branches=3), 0)
    segs = tree.segments
    if len(segs) > 1:
        segs[1].points = segs[1].points + 1.0
        with pytest.raises(ValueError):
            VesselTree(segs)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def test_empty_tree_renders_black():
    spec = small_spec()
    img = render_rvm(VesselTree([]), spec, spec.groups[1], seed=0)
    assert img.nnz() == 0
    assert (img.width, img.height) == SMALL


def test_speckle_stays_dim():
    spec = small_spec(noise=0.05)
    img = render_rvm(VesselTree([]), spec, spec.groups[1], seed=0)
    values = img.pixels[img.pixels > 0]
    assert values.size > 0
    assert values.min() >= 1 and values.max() <= 30


def test_confidence_bias_shifts_vessel_intensity():
    spec = small_spec(confidence_bias=50)
    tree = tree_for(spec)
    designated = render_rvm(tree, spec, spec.designated, seed=3).pixels.astype(int)
    other = render_rvm(tree, spec, spec.groups[1], seed=3).pixels.astype(int)
    mask = other > 0
    assert np.array_equal(mask, designated > 0)
    assert abs((designated[mask] - other[mask]).mean() - 50) < 0.01


def test_caliber_delta_widens_vessels():
    spec = small_spec(caliber_delta=3)
    tree = tree_for(spec)
    designated = render_rvm(tree, spec, spec.designated, seed=0)
    other = render_rvm(tree, spec, spec.groups[1], seed=0)
    assert designated.nnz() > other.nnz()


def test_no_tint_means_identical_fundus():
    spec = small_spec(tint_offset=0)
    tree = tree_for(spec)
    a = render_rfi(tree, spec, spec.designated, seed=4)
    b = render_rfi(tree, spec, spec.groups[1], seed=4)
    assert np.array_equal(a.red, b.red) and np.array_equal(a.blue, b.blue)


def test_tint_shifts_red_channel():
    spec = small_spec(tint_offset=30)
    tree = tree_for(spec)
    a = render_rfi(tree, spec, spec.designated, seed=4).red.astype(float)
    b = render_rfi(tree, spec, spec.groups[1], seed=4).red.astype(float)
    assert abs((a - b).mean() - 30) < 0.5


def test_vessels_darker_than_background():
    spec = small_spec()
    tree = tree_for(spec)
    vessel = render_rvm(tree, spec, spec.groups[1], seed=0).pixels > 0
    fundus = render_rfi(tree, spec, spec.groups[1], seed=0)
    assert fundus.red[vessel].mean() < fundus.red[~vessel].mean()


# ---------------------------------------------------------------------------
# cohorts
# ---------------------------------------------------------------------------

def test_cohort_spec_validation_names_field():
    with pytest.raises(ValidationError) as e:
        CohortSpec(n_subjects=(0, 5))
    assert 'n_subjects' in str(e.value)
    with pytest.raises(ValidationError):
        CohortSpec(groups=('A', 'A'))
    with pytest.raises(ValidationError):
        CohortSpec(images_per_subject=(3, 2))


def test_designated_group_gets_extra_branches():
    spec = CohortSpec(branch_delta=6, base_branches=10)
    assert spec.tree_params(spec.designated).expected_branches == 16
    assert spec.tree_params(spec.groups[1]).expected_branches == 10


def test_subject_table_covariates():
    table = subject_table(CohortSpec(n_subjects=(30, 20), images_per_subject=(2, 4)))
    assert len(table) == 50
    assert table['subject_id'].is_unique
    assert (table['bw_g'] >= 300).all() and (table['ga_wk'] >= 20).all()
    assert (table['pma_wk'] >= table['ga_wk']).all()
    assert table['n_images'].between(2, 4).all()
    assert (table['group'] == 'Black').sum() == 30


def test_covariates_balanced_across_groups():
    tests = passed = 0
    for seed in range(100):
        table = subject_table(CohortSpec(n_subjects=(20, 20), seed=seed))
        for column in ('bw_g', 'ga_wk', 'pma_wk'):
            a = table.loc[table['group'] == 'Black', column]
            b = table.loc[table['group'] == 'White', column]
            tests += 1
            passed += welch_t(a, b).p > 0.05
    assert passed >= 0.9 * tests


def test_gen_cohort_files(tmp_path):
    spec = CohortSpec(n_subjects=(10, 10), images_per_subject=(3, 3), image_size=(64, 48), seed=7)
    manifest = gen_cohort(spec, tmp_path, with_rfi=True)
    assert manifest.n_subjects == 20 and manifest.n_images == 60

    loaded = load_manifest(tmp_path / 'manifest.csv')
    assert loaded.n_images == 60
    first = next(iter(loaded.subjects.values()))
    img = read_gray(loaded.resolve(first.image_paths[0]))
    assert (img.width, img.height) == (64, 48)

    rfi = load_manifest(tmp_path / 'manifest_rfi.csv')
    color = read_color(rfi.resolve(rfi.subjects[first.subject_id].image_paths[0]))
    assert (color.width, color.height) == (64, 48)
    assert (tmp_path / 'cohort_spec.json').exists()


def test_gen_cohort_reproducible_across_jobs(tmp_path):
    spec = CohortSpec(n_subjects=(3, 3), images_per_subject=(1, 2), image_size=(48, 32), seed=11)
    gen_cohort(spec, tmp_path / 'a', jobs=1)
    gen_cohort(spec, tmp_path / 'b', jobs=3)
    files_a = sorted(p.relative_to(tmp_path / 'a') for p in (tmp_path / 'a').rglob('*') if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / 'b') for p in (tmp_path / 'b').rglob('*') if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / 'a' / rel).read_bytes() == (tmp_path / 'b' / rel).read_bytes()


def test_no_tint_groups_share_red_distribution():
    spec = small_spec(tint_offset=0)
    params = spec.tree_params(spec.groups[1])

    def red_means(group, seeds):
        return [render_rfi(gen_tree(params, s), spec, group, seed=s).red.mean() for s in seeds]

    res = ks_2samp(red_means(spec.designated, range(0, 30)), red_means(spec.groups[1], range(100, 130)))
    assert res.pvalue > 0.001
