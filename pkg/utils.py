#!/usr/bin/env python3
"""
Shared helpers for the leakage audit: logging setup, JSON configuration loading
and matplotlib figures written as reproducible SVG.
"""

import json
import logging
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure
from pydantic import ValidationError
from pythonjsonlogger.json import JsonFormatter

from config import LOGGING_CONFIG, PLOT_CONFIG

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Malformed or invalid configuration input (exit code 2 on the command line)"""


def setup_logging(level=None, json_logs=False):
    """Configure the root logger once; JSON records when json_logs is set"""
    handler = logging.StreamHandler()
    if json_logs:
        handler.setFormatter(JsonFormatter('%(asctime)s %(levelname)s %(name)s %(message)s'))
    else:
        handler.setFormatter(logging.Formatter(LOGGING_CONFIG['format']))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level or LOGGING_CONFIG['level'])


def read_json(path):
    """Parse a JSON file; syntax errors report the byte offset"""
    raw = Path(path).read_bytes()
    text = raw.decode('utf-8')
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[:e.pos].encode('utf-8'))
        raise ConfigError("%s: malformed JSON at byte offset %d (%s)" % (path, offset, e.msg)) from e


def write_json(data, path):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + '\n')


def format_validation_error(err: ValidationError, source='config'):
    parts = []
    for item in err.errors():
        loc = '.'.join(str(x) for x in item['loc']) or '<root>'
        parts.append("%s: %s" % (loc, item['msg']))
    return "%s invalid: %s" % (source, '; '.join(parts))


def load_model(model_cls, path=None, overrides=None):
    """Build a pydantic model from defaults < JSON file < overrides

    Override keys may be dotted ("train.seed") to reach nested models; None
    values are skipped.
    """
    data = {}
    if path is not None:
        data = read_json(path)
        if not isinstance(data, dict):
            raise ConfigError("%s: expected a JSON object at the top level" % path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split('.')
        for name in parents:
            node = node.setdefault(name, {})
        node[leaf] = value
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e, str(path) if path else model_cls.__name__)) from e


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def _save_svg(fig, path):
    matplotlib.rcParams['svg.hashsalt'] = PLOT_CONFIG['svg_hashsalt']
    fig.savefig(path, format='svg', metadata={'Date': None})


def plot_curves(report, title, path):
    """PR and ROC curves of one MetricsReport side by side"""
    fig = Figure(figsize=(PLOT_CONFIG['figsize'][0] * 2, PLOT_CONFIG['figsize'][1]), dpi=PLOT_CONFIG['dpi'])
    ax1, ax2 = fig.subplots(1, 2)

    ax1.step(report.pr_recall, report.pr_precision, where='post', color='tab:blue')
    ax1.axhline(y=report.prevalence, color='grey', linestyle='--', label='Chance (%.3f)' % report.prevalence)
    ax1.set_xlabel('Recall')
    ax1.set_ylabel('Precision')
    ax1.set_title('PR, AUC %.3f' % report.auc_pr)
    ax1.set_xlim(0, 1)
    ax1.set_ylim(0, 1.02)
    ax1.legend(loc='lower left')

    ax2.plot(report.roc_fpr, report.roc_tpr, color='tab:red')
    ax2.plot([0, 1], [0, 1], color='grey', linestyle='--')
    ax2.set_xlabel('False positive rate')
    ax2.set_ylabel('True positive rate')
    ax2.set_title('ROC, AUC %.3f' % report.auc_roc)
    ax2.set_xlim(0, 1)
    ax2.set_ylim(0, 1.02)

    fig.suptitle('%s (%s level)' % (title, report.level))
    fig.tight_layout()
    _save_svg(fig, path)


def plot_threshold_trend(results, path, prevalence=None):
    """AUC-PR against lower threshold, one line per variant

    results: DataFrame with columns variant, lower, auc_pr (image level)
    """
    fig = Figure(figsize=PLOT_CONFIG['figsize'], dpi=PLOT_CONFIG['dpi'])
    ax = fig.subplots()
    for variant, part in results.groupby('variant', sort=True):
        part = part.sort_values('lower')
        ax.plot(part['lower'], part['auc_pr'], 'o-', label=variant)
    if prevalence is not None:
        ax.axhline(y=prevalence, color='grey', linestyle='--', label='Chance')
    ax.set_xlabel('Lower PIV threshold')
    ax.set_ylabel('Image-level AUC-PR')
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.grid(True)
    fig.tight_layout()
    _save_svg(fig, path)


def plot_channel_histograms(histograms, path):
    """histograms: ChannelHistogram objects, one panel per channel"""
    channels = sorted({h.channel for h in histograms}, key=['red', 'green', 'blue'].index)
    fig = Figure(figsize=(PLOT_CONFIG['figsize'][0] * len(channels), PLOT_CONFIG['figsize'][1]),
                 dpi=PLOT_CONFIG['dpi'])
    axes = fig.subplots(1, len(channels), squeeze=False)
    for ax, channel in zip(axes[0], channels):
        for h in histograms:
            if h.channel == channel and h.total:
                ax.plot(range(256), h.bin_counts / h.total, label=h.group_label)
        ax.set_title('%s channel' % channel.capitalize())
        ax.set_xlabel('PIV')
        ax.set_ylabel('Fraction of pixels')
        ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)


def plot_pixel_counts(stats_by_label, path):
    """stats_by_label: {panel title: PixelCountStats}"""
    n = len(stats_by_label)
    fig = Figure(figsize=(PLOT_CONFIG['figsize'][0] * n, PLOT_CONFIG['figsize'][1]), dpi=PLOT_CONFIG['dpi'])
    axes = fig.subplots(1, n, squeeze=False)
    for ax, (title, stats) in zip(axes[0], stats_by_label.items()):
        centres = (stats.bin_edges[:-1] + stats.bin_edges[1:]) / 2.0
        width = stats.bin_edges[1] - stats.bin_edges[0] if len(stats.bin_edges) > 1 else 1.0
        for group, hist in stats.histograms.items():
            ax.bar(centres, hist, width=width, alpha=0.5, label=group)
        ax.set_title(title)
        ax.set_xlabel('Segmented pixels per image')
        ax.set_ylabel('Images')
        ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
