"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Report Bundle
Write-once run bundles, aligned-text rendering and bundle drift comparison
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, List

import numpy as np

logger = logging.getLogger(__name__)

REPORT_FILE = 'report.json'
TEXT_FILE = 'report.txt'
VALIDATION_FILE = 'validation.json'
RUN_LOG_FILE = 'run_log.jsonl'
COMPLETE_MARKER = 'COMPLETE'
FAILED_MARKER = 'FAILED.json'
VOLATILE_KEYS = ('timestamps',)

SEVERITY_DESCRIPTIONS = {
    'NO_CHANGE': '✅ No changes detected',
    'LOW': '🟢 Minor drift - document for reference',
    'MEDIUM': '🟡 Moderate drift - review the constants',
    'HIGH': '🟠 Verdicts changed - action required',
    'CRITICAL': '🔴 Critical drift - rerun and review immediately',
}


class BundleError(RuntimeError):
    """Raised on a second write of an artifact or a write into a completed bundle"""


def sanitize(value):
    """JSON-safe copy: numpy scalars unwrapped, inf / nan as strings, tuples as lists"""
    if isinstance(value, dict):
        return {str(k): sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize(v) for v in value]
    if isinstance(value, np.ndarray):
        return [sanitize(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return 'nan'
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    return value


def canonical_json(report):
    """Sorted-key dump without the volatile keys; equal runs give equal strings"""
    stable = {k: v for k, v in report.items() if k not in VOLATILE_KEYS}
    return json.dumps(sanitize(stable), sort_keys=True, indent=2)


def _number(value):
    if isinstance(value, str) and value in ('inf', '-inf', 'nan'):
        return float(value)
    return value


def build_report(command, config, config_hash, reports, validation=None, started=None):
    """The report.json payload of one run"""
    experiments = [r.to_dict() for r in reports]
    counts = {}
    for entry in experiments:
        counts[entry['verdict']] = counts.get(entry['verdict'], 0) + 1
    return sanitize({
        'command': command,
        'config_hash': config_hash,
        'schema_version': config.schema_version,
        'operator': config.operator.builtin or config.operator.name or 'custom',
        'seed': config.seed,
        'validation': None if validation is None else {'passed': validation.passed,
                                                       'failures': validation.failures()},
        'experiments': experiments,
        'summary': counts,
        'exit_status': exit_status(reports, validation),
        'timestamps': {'started': started, 'finished': datetime.now(timezone.utc).isoformat()},
    })


def exit_status(reports, validation=None):
    """1 iff validation failed or any non-vacuous experiment FAILs"""
    if validation is not None and not validation.passed:
        return 1
    return 1 if any(r.verdict == 'FAIL' for r in reports) else 0


class BundleWriter:
    """One run directory <root>/<command>-<hash8>-<timestamp>; every file is written once"""

    def __init__(self, root, command, config_hash, timestamp=None):
        timestamp = timestamp or datetime.now(timezone.utc).strftime('%Y%m%dT%H%M%S%f')
        self.path = os.path.join(root, f'{command}-{config_hash[:8]}-{timestamp}')
        try:
            os.makedirs(self.path)
        except FileExistsError as exc:
            raise BundleError(f"bundle directory {self.path} already exists") from exc
        self.written = set()

    @property
    def run_log_path(self):
        return os.path.join(self.path, RUN_LOG_FILE)

    @property
    def completed(self):
        return (os.path.exists(os.path.join(self.path, COMPLETE_MARKER))
                or os.path.exists(os.path.join(self.path, FAILED_MARKER)))

    def write_text(self, relative, text):
        if self.completed:
            raise BundleError(f"bundle {self.path} is closed")
        target = os.path.join(self.path, relative)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        try:
            with open(target, 'x') as f:
                f.write(text)
        except FileExistsError as exc:
            raise BundleError(f"{relative} was already written") from exc
        self.written.add(relative)
        logger.debug("wrote %s", target)
        return target

    def write_json(self, relative, payload):
        return self.write_text(relative, json.dumps(sanitize(payload), sort_keys=True, indent=2) + '\n')

    def write_series(self, tag, index, rows):
        """series/<tag>-<index>.csv, one row per grid; columns are the union of the row keys"""
        if not rows:
            return None
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
        relative = os.path.join('series', f'{tag}-{index}.csv')
        target = os.path.join(self.path, relative)
        if self.completed:
            raise BundleError(f"bundle {self.path} is closed")
        os.makedirs(os.path.dirname(target), exist_ok=True)
        try:
            with open(target, 'x', newline='') as f:
                writer = csv.DictWriter(f, fieldnames=columns)
                writer.writeheader()
                for row in rows:
                    writer.writerow({k: _cell(row.get(k)) for k in columns})
        except FileExistsError as exc:
            raise BundleError(f"{relative} was already written") from exc
        self.written.add(relative)
        return target

    def write_report(self, report):
        self.write_text(REPORT_FILE, json.dumps(report, sort_keys=True, indent=2) + '\n')
        self.write_text(TEXT_FILE, render_text(report))
        for index, entry in enumerate(report.get('experiments', [])):
            self.write_series(entry['tag'], index, entry.get('series') or [])

    def complete(self):
        self.write_text(COMPLETE_MARKER, datetime.now(timezone.utc).isoformat() + '\n')

    def fail(self, stage, error):
        """Close a partial bundle with FAILED.json naming the stage and the error"""
        payload = {'stage': stage, 'error': f'{type(error).__name__}: {error}',
                   'written': sorted(self.written)}
        self.write_json(FAILED_MARKER, payload)


def _cell(value):
    value = sanitize(value)
    if isinstance(value, (list, dict)):
        return json.dumps(value, sort_keys=True)
    return '' if value is None else value


def _format(value):
    value = _number(value)
    if value is None:
        return '-'
    if isinstance(value, float):
        return f'{value:.6g}'
    return str(value)


VERDICT_ICONS = {'PASS': '✅', 'FAIL': '❌', 'VACUOUS_PASS': '⚪', 'INCONCLUSIVE': '⚠️'}


def render_text(report):
    """Aligned-column text rendering of a report.json payload"""
    lines = ["=" * 70, "📊 KIMURA LAB REPORT", "=" * 70, ""]
    lines.append(f"Command:     {report.get('command')}")
    lines.append(f"Config hash: {report.get('config_hash')}")
    lines.append(f"Operator:    {report.get('operator')}")
    lines.append(f"Seed:        {report.get('seed')}")
    validation = report.get('validation')
    if validation is not None:
        lines.append(f"Validation:  {'passed' if validation['passed'] else 'FAILED ' + ', '.join(validation['failures'])}")
    lines.append("")

    experiments = report.get('experiments', [])
    if experiments:
        lines += ["=" * 70, "🧪 EXPERIMENTS", "=" * 70, ""]
        width = max(len(e['tag']) for e in experiments)
        lines.append(f"   {'tag'.ljust(width)}  {'verdict'.ljust(13)}  constants")
        for entry in experiments:
            icon = VERDICT_ICONS.get(entry['verdict'], '•')
            constants = ', '.join(f'{k}={_format(v)}' for k, v in sorted(entry.get('constants', {}).items()))
            lines.append(f"{icon} {entry['tag'].ljust(width)}  {entry['verdict'].ljust(13)}  {constants}")
            for flag in entry.get('flags', []):
                lines.append(f"   {' ' * width}  ↳ {flag}")
        lines.append("")

    lines += ["=" * 70, "🎯 SUMMARY", "=" * 70, ""]
    for verdict, count in sorted(report.get('summary', {}).items()):
        lines.append(f"   {verdict.ljust(13)} {count}")
    lines.append(f"   {'exit status'.ljust(13)} {report.get('exit_status')}")
    lines.append("")
    return "\n".join(lines)


def load_report(path):
    """report.json of a bundle directory, or a report file itself"""
    if os.path.isdir(path):
        path = os.path.join(path, REPORT_FILE)
    with open(path) as f:
        return json.load(f)


@dataclass
class BundleComparison:
    """Differences between two report payloads with a 0-100 drift score"""
    added: List[str] = field(default_factory=list)
    removed: List[str] = field(default_factory=list)
    verdict_flips: List[Dict] = field(default_factory=list)
    drifted: List[Dict] = field(default_factory=list)
    score: int = 0
    severity: str = 'NO_CHANGE'

    def to_dict(self):
        return dict(self.__dict__)


def _keyed(report):
    keyed = {}
    for index, entry in enumerate(report.get('experiments', [])):
        keyed[f"{entry['tag']}#{index}"] = entry
    return keyed


def _severity(score):
    if score == 0:
        return 'NO_CHANGE'
    if score < 20:
        return 'LOW'
    if score < 50:
        return 'MEDIUM'
    if score < 80:
        return 'HIGH'
    return 'CRITICAL'


def compare_bundles(baseline, current, tolerance=0.05):
    """Added or removed experiments, verdict flips and constants drifting beyond the relative tolerance"""
    before, after = _keyed(baseline), _keyed(current)
    result = BundleComparison()
    result.added = sorted(set(after) - set(before))
    result.removed = sorted(set(before) - set(after))
    for key in sorted(set(before) & set(after)):
        old, new = before[key], after[key]
        if old['verdict'] != new['verdict']:
            result.verdict_flips.append({'experiment': key, 'baseline': old['verdict'], 'current': new['verdict']})
        for name in sorted(set(old.get('constants', {})) & set(new.get('constants', {}))):
            a, b = _number(old['constants'][name]), _number(new['constants'][name])
            if not isinstance(a, (int, float)) or not isinstance(b, (int, float)) or isinstance(a, bool):
                continue
            if a == b or (math.isnan(a) and math.isnan(b)):
                continue
            scale = max(abs(a), abs(b))
            change = float('inf') if math.isinf(scale) else abs(a - b) / scale
            if change > tolerance:
                result.drifted.append({'experiment': key, 'constant': name, 'baseline': a, 'current': b,
                                       'relative_change': change})

    score = 0
    score += len(result.added) * 5
    score += len(result.removed) * 15
    score += sum(25 if flip['current'] == 'FAIL' else 10 for flip in result.verdict_flips)
    score += len(result.drifted) * 3
    result.score = min(score, 100)
    result.severity = _severity(result.score)
    return result


def render_comparison(comparison, baseline_path, current_path):
    lines = ["=" * 60, "📊 BUNDLE DRIFT REPORT", "=" * 60, ""]
    lines.append(f"Baseline:  {baseline_path}")
    lines.append(f"Current:   {current_path}")
    lines.append("")
    lines.append(f"Drift Score: {comparison.score}/100")
    lines.append(f"Severity:    {comparison.severity}")
    lines.append(f"Impact: {SEVERITY_DESCRIPTIONS[comparison.severity]}")
    lines.append("")
    if comparison.added or comparison.removed:
        lines += ["=" * 60, "🧪 EXPERIMENT CHANGES", "=" * 60, ""]
        for key in comparison.added:
            lines.append(f"✅ Added:   {key}")
        for key in comparison.removed:
            lines.append(f"❌ Removed: {key}")
        lines.append("")
    if comparison.verdict_flips:
        lines += ["=" * 60, "🔁 VERDICT FLIPS", "=" * 60, ""]
        for flip in comparison.verdict_flips:
            lines.append(f"   • {flip['experiment']}: {flip['baseline']} -> {flip['current']}")
        lines.append("")
    if comparison.drifted:
        lines += ["=" * 60, "📈 CONSTANT DRIFT", "=" * 60, ""]
        for item in comparison.drifted:
            lines.append(f"   • {item['experiment']} {item['constant']}: "
                         f"{_format(item['baseline'])} -> {_format(item['current'])} "
                         f"({_format(item['relative_change'])} relative)")
        lines.append("")
    if comparison.score == 0:
        lines.append("Bundles agree: no drift from baseline.")
        lines.append("")
    return "\n".join(lines)
