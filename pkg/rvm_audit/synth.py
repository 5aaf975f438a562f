"""Synthetic cohorts with switchable group-correlated signals.

Each image is a procedural vessel tree: a seeded branching random walk rooted at
an off-centre "optic disc".  Two leakage pathways can be switched on for the
designated group (the first entry of CohortSpec.groups):

  geometry  - caliber_delta (wider vessels), branch_delta (more branches)
  segmenter - confidence_bias (brighter vessel PIVs in the RVM)

plus tint_offset for the fundus photographs.  Covariates are drawn from
group-independent priors so they carry no signal.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw
from pydantic import BaseModel, Field, field_validator, model_validator
from tqdm import tqdm

from config import COVARIATE_PRIORS, GROUP_LABELS, MIN_PMA_GAP_WK
from rvm_audit.cohort import Manifest, SubjectRecord
from rvm_audit.imagecore import MAXVAL, ColorImage, GrayImage, round_half_up, write_color, write_gray

logger = logging.getLogger(__name__)

# intensity model of the simulated segmenter
PIV_FLOOR = 40.0
PIV_SPAN = 110.0
PIV_SD = 12.0
RIM_FACTOR = 0.7
SPECKLE_RANGE = (1, 30)

# fundus plate
FUNDUS_BASE = (175.0, 85.0, 45.0)
FUNDUS_TEXTURE_SD = 5.0
VESSEL_DARKENING = 0.4

# stream tags for SeedSequence spawn keys
_COVARIATE_STREAM, _TREE_STREAM, _RVM_STREAM, _RFI_STREAM = 0, 1, 2, 3


class TreeParams(BaseModel):
    expected_branches: float = Field(default=12.0, ge=0, description="Mean number of branching events")
    max_depth: int = Field(default=6, ge=0, description="Deepest generation of child segments")
    canvas: Tuple[int, int] = Field(default=(640, 480), description="(width, height) in pixels")
    root_width: float = Field(default=6.0, ge=1, description="Trunk width in pixels")
    taper: float = Field(default=0.75, gt=0, le=1, description="Child width / parent width")
    step_length: float = Field(default=8.0, gt=0, description="Random-walk step at depth 0")
    segment_steps: int = Field(default=14, ge=1, description="Steps per segment")
    turn_sd: float = Field(default=0.2, ge=0, description="Heading noise per step (radians)")


class Segment:
    """One polyline of the tree; points are (x, y) rows"""

    def __init__(self, points, width: float, confidence: float, depth: int, parent: Optional[int]):
        self.points = np.asarray(points, dtype=np.float64)
        self.width = float(width)
        self.confidence = float(confidence)
        self.depth = depth
        self.parent = parent

    @property
    def end_heading(self) -> float:
        d = self.points[-1] - self.points[-2]
        return math.atan2(d[1], d[0])

    def __repr__(self):
        return "Segment(depth=%d, width=%.2f, n_points=%d)" % (self.depth, self.width, len(self.points))


class VesselTree:
    def __init__(self, segments: List[Segment]):
        for k, seg in enumerate(segments):
            if seg.width < 1:
                raise ValueError("segment %d has width %.3f < 1" % (k, seg.width))
            if not 0 <= seg.confidence <= 1:
                raise ValueError("segment %d confidence %.3f outside [0, 1]" % (k, seg.confidence))
            if (seg.parent is None) != (k == 0):
                raise ValueError("only the first segment may be the root")
            if seg.parent is not None:
                if not 0 <= seg.parent < k:
                    raise ValueError("segment %d names parent %d out of order" % (k, seg.parent))
                if not np.array_equal(seg.points[0], segments[seg.parent].points[-1]):
                    raise ValueError("segment %d does not start where its parent ends" % k)
        self.segments = segments

    def __len__(self):
        return len(self.segments)

    def __repr__(self):
        return "VesselTree(%d segments)" % len(self.segments)


def confidence_at(depth: int) -> float:
    return max(0.35, 0.88 ** depth)


def _walk(rng, start, heading, depth, params: TreeParams):
    w, h = params.canvas
    step = params.step_length * (0.85 ** depth)
    points = [np.asarray(start, dtype=np.float64)]
    for _ in range(params.segment_steps):
        heading += rng.normal(0.0, params.turn_sd)
        nxt = points[-1] + step * np.array([math.cos(heading), math.sin(heading)])
        points.append(np.clip(nxt, [0.0, 0.0], [w - 1.0, h - 1.0]))
    return np.array(points)


def gen_tree(params: TreeParams, seed) -> VesselTree:
    """Branching random walk; K ~ Poisson(expected_branches) split events, each
    turning a leaf above max_depth into two children, so a tree has 1 + 2K
    segments unless the depth limit runs out of leaves."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w, h = params.canvas
    n_events = int(rng.poisson(params.expected_branches))
    root = (0.3 * (w - 1), 0.5 * (h - 1))
    heading = rng.uniform(-0.6, 0.6)
    segments = [Segment(_walk(rng, root, heading, 0, params), params.root_width,
                        confidence_at(0), 0, None)]
    leaves = [0]
    for _ in range(n_events):
        open_leaves = [i for i in leaves if segments[i].depth < params.max_depth]
        if not open_leaves:
            break
        idx = open_leaves[int(rng.integers(len(open_leaves)))]
        leaves.remove(idx)
        parent = segments[idx]
        depth = parent.depth + 1
        width = max(1.0, parent.width * params.taper)
        for sign in (-1.0, 1.0):
            heading = parent.end_heading + sign * rng.uniform(0.3, 0.8)
            points = _walk(rng, parent.points[-1], heading, depth, params)
            segments.append(Segment(points, width, confidence_at(depth), depth, idx))
            leaves.append(len(segments) - 1)
    return VesselTree(segments)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

class CohortSpec(BaseModel):
    groups: Tuple[str, str] = Field(default=GROUP_LABELS, description="(designated group, other group)")
    n_subjects: Tuple[int, int] = Field(default=(40, 40), description="Subjects per group")
    images_per_subject: Tuple[int, int] = Field(default=(5, 5), description="Inclusive (min, max)")
    image_size: Tuple[int, int] = Field(default=(640, 480), description="(width, height) in pixels")
    tint_offset: float = Field(default=0.0, ge=0, le=60, description="Red up / blue down for the designated group")
    caliber_delta: float = Field(default=0.0, ge=0, le=10, description="Extra vessel width (px)")
    confidence_bias: float = Field(default=0.0, ge=-50, le=50, description="Vessel PIV shift")
    branch_delta: float = Field(default=0.0, ge=0, description="Extra expected branching events")
    base_branches: float = Field(default=12.0, ge=0, description="Expected branching events")
    noise: float = Field(default=0.001, ge=0, le=1, description="Background speckle probability")
    seed: int = Field(default=0, ge=0)

    @field_validator('n_subjects')
    @classmethod
    def _positive_counts(cls, v):
        if min(v) < 1:
            raise ValueError("n_subjects must be at least 1 per group")
        return v

    @field_validator('images_per_subject')
    @classmethod
    def _image_range(cls, v):
        if v[0] < 1 or v[1] < v[0]:
            raise ValueError("images_per_subject must satisfy 1 <= min <= max")
        return v

    @field_validator('image_size')
    @classmethod
    def _min_size(cls, v):
        if min(v) < 16:
            raise ValueError("image_size must be at least 16x16")
        return v

    @model_validator(mode='after')
    def _distinct_groups(self):
        if self.groups[0] == self.groups[1]:
            raise ValueError("group labels must differ")
        return self

    @property
    def designated(self) -> str:
        return self.groups[0]

    def tree_params(self, group: str) -> TreeParams:
        w, h = self.image_size
        scale = min(w, h) / 480.0
        return TreeParams(expected_branches=self.base_branches + (self.branch_delta if group == self.designated else 0.0),
                          canvas=(w, h), root_width=max(1.0, 6.0 * scale),
                          step_length=8.0 * scale)


def _vessel_layers(tree: VesselTree, size, extra_width: float):
    """Per-pixel confidence and rim factor (0 on background)

    Depth layers are drawn deepest first, so trunks overwrite their branches.
    """
    w, h = size
    confidence = np.zeros((h, w))
    rim = np.zeros((h, w))
    depths = sorted({seg.depth for seg in tree.segments}, reverse=True)
    for depth in depths:
        full = Image.new('L', (w, h), 0)
        core = Image.new('L', (w, h), 0)
        draw_full = ImageDraw.Draw(full)
        draw_core = ImageDraw.Draw(core)
        layer_conf = 0.0
        for seg in tree.segments:
            if seg.depth != depth:
                continue
            pts = [tuple(p) for p in seg.points]
            width = max(1, int(round_half_up(seg.width + extra_width)))
            draw_full.line(pts, fill=255, width=width, joint='curve')
            draw_core.line(pts, fill=255, width=max(1, width // 2), joint='curve')
            layer_conf = max(layer_conf, seg.confidence)
        on = np.asarray(full) > 0
        in_core = np.asarray(core) > 0
        confidence[on] = layer_conf
        rim[on] = np.where(in_core[on], 1.0, RIM_FACTOR)
    return confidence, rim


def render_rvm(tree: VesselTree, spec: CohortSpec, group: str, seed=0) -> GrayImage:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    designated = group == spec.designated
    w, h = spec.image_size
    confidence, rim = _vessel_layers(tree, (w, h), spec.caliber_delta if designated else 0.0)
    vessel = rim > 0

    # full-size draws keep the stream position independent of the tree
    gauss = rng.normal(0.0, PIV_SD, size=(h, w))
    speckle_u = rng.random((h, w))
    speckle_v = rng.integers(SPECKLE_RANGE[0], SPECKLE_RANGE[1] + 1, size=(h, w))

    mean = rim * (PIV_FLOOR + PIV_SPAN * confidence)
    if designated:
        mean = mean + spec.confidence_bias
    pixels = np.zeros((h, w))
    pixels[vessel] = np.clip(round_half_up(mean[vessel] + gauss[vessel]), 1, MAXVAL)
    speckle = ~vessel & (speckle_u < spec.noise)
    pixels[speckle] = speckle_v[speckle]
    return GrayImage(pixels)


def render_rfi(tree: VesselTree, spec: CohortSpec, group: str, seed=0) -> ColorImage:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    designated = group == spec.designated
    w, h = spec.image_size
    confidence, rim = _vessel_layers(tree, (w, h), spec.caliber_delta if designated else 0.0)
    texture = rng.normal(0.0, FUNDUS_TEXTURE_SD, size=(3, h, w))

    base = np.array(FUNDUS_BASE)
    if designated:
        base = base + np.array([spec.tint_offset, 0.0, -spec.tint_offset])
    darkening = VESSEL_DARKENING * np.array(FUNDUS_BASE)[:, None, None] * (rim > 0) * (0.5 + 0.5 * confidence)
    planes = base[:, None, None] + texture - darkening
    return ColorImage.from_planes(np.clip(round_half_up(planes), 0, MAXVAL))


# ---------------------------------------------------------------------------
# cohorts
# ---------------------------------------------------------------------------

def _stream(spec: CohortSpec, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=tuple(int(k) for k in key)))


def subject_table(spec: CohortSpec) -> pd.DataFrame:
    """One row per subject: id, group, covariates and image count

    Covariates use the pooled priors for both groups.
    """
    rows = []
    index = 0
    for group, count in zip(spec.groups, spec.n_subjects):
        for _ in range(count):
            rng = _stream(spec, index, _COVARIATE_STREAM)
            bw_mu, bw_sd = COVARIATE_PRIORS['bw_g']
            ga_mu, ga_sd = COVARIATE_PRIORS['ga_wk']
            pma_mu, pma_sd = COVARIATE_PRIORS['pma_wk']
            bw = max(300.0, rng.normal(bw_mu, bw_sd))
            ga = max(20.0, rng.normal(ga_mu, ga_sd))
            pma = max(ga + MIN_PMA_GAP_WK, rng.normal(pma_mu, pma_sd))
            lo, hi = spec.images_per_subject
            rows.append({'index': index, 'subject_id': "S%04d" % index, 'group': group,
                         'bw_g': round(bw, 1), 'ga_wk': round(ga, 2), 'pma_wk': round(pma, 2),
                         'n_images': int(rng.integers(lo, hi + 1))})
            index += 1
    return pd.DataFrame(rows)


def _render_subject(spec: CohortSpec, row, image_dir: Path, with_rfi: bool):
    rvm_paths, rfi_paths = [], []
    params = spec.tree_params(row['group'])
    for k in range(row['n_images']):
        tree = gen_tree(params, _stream(spec, row['index'], _TREE_STREAM, k))
        stem = "%s_%d" % (row['subject_id'], k)
        write_gray(render_rvm(tree, spec, row['group'], _stream(spec, row['index'], _RVM_STREAM, k)),
                   image_dir / (stem + '.pgm'))
        rvm_paths.append('images/%s.pgm' % stem)
        if with_rfi:
            write_color(render_rfi(tree, spec, row['group'], _stream(spec, row['index'], _RFI_STREAM, k)),
                        image_dir / (stem + '.ppm'))
            rfi_paths.append('images/%s.ppm' % stem)
    return rvm_paths, rfi_paths


def gen_cohort(spec: CohortSpec, out_dir, with_rfi: bool = True, jobs: int = 1) -> Manifest:
    """Write images/*.pgm (+ *.ppm), manifest.csv, manifest_rfi.csv and cohort_spec.json

    Subjects render in parallel when jobs > 1; files are named per subject and
    the manifests are written once, in subject order.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / 'images'
    image_dir.mkdir(parents=True, exist_ok=True)
    table = subject_table(spec)
    rows = table.to_dict('records')

    def work(row):
        return _render_subject(spec, row, image_dir, with_rfi)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        rendered = list(tqdm(pool.map(work, rows), total=len(rows), desc='synth',
                             disable=None, leave=False))

    rvm_subjects, rfi_subjects = [], []
    for row, (rvm_paths, rfi_paths) in zip(rows, rendered):
        common = dict(subject_id=row['subject_id'], group=row['group'], bw=row['bw_g'],
                      ga=row['ga_wk'], pma=row['pma_wk'])
        rvm_subjects.append(SubjectRecord(image_paths=rvm_paths, **common))
        if with_rfi:
            rfi_subjects.append(SubjectRecord(image_paths=rfi_paths, **common))

    manifest = Manifest(rvm_subjects, root=out_dir)
    manifest.write(out_dir / 'manifest.csv')
    if with_rfi:
        Manifest(rfi_subjects, root=out_dir).write(out_dir / 'manifest_rfi.csv')
    (out_dir / 'cohort_spec.json').write_text(json.dumps(spec.model_dump(mode='json'), indent=2) + '\n')
    logger.info("synthesised %s in %s (designated group %s)", manifest, out_dir, spec.designated)
    return manifest
