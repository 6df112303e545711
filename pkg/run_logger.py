"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Run Logger
Structured JSON-lines events for one run, with search and trace
"""

import json
import logging
import threading
from datetime import datetime, timezone

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(verbose=False):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


class StructuredLogger:
    """Structured logger that emits one JSON object per event to the console and the run log"""

    def __init__(self, component, run_id, log_path=None):
        self.component = component
        self.run_id = run_id
        self.log_path = log_path
        self.logger = logging.getLogger(component)
        self.events = []
        self.lock = threading.Lock()

    def log(self, level, message, **kwargs):
        log_entry = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'component': self.component,
            'level': level,
            'message': message,
            'run_id': self.run_id,
            **kwargs,
        }
        self.logger.log(logging.getLevelName(level), json.dumps(log_entry, default=str))
        with self.lock:
            self.events.append(log_entry)
            if self.log_path:
                with open(self.log_path, 'a') as f:
                    f.write(json.dumps(log_entry, default=str) + '\n')
        return log_entry

    def info(self, message, **kwargs):
        return self.log('INFO', message, **kwargs)

    def warning(self, message, **kwargs):
        return self.log('WARNING', message, **kwargs)

    def error(self, message, **kwargs):
        return self.log('ERROR', message, **kwargs)

    def child(self, component):
        """Logger for a sub-component sharing the run id, file and event list"""
        other = StructuredLogger(component, self.run_id, self.log_path)
        other.events = self.events
        other.lock = self.lock
        return other


def load_events(log_path):
    events = []
    with open(log_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError:
                continue
    return events


def search_events(events, **criteria):
    """Events whose fields equal every given criterion"""
    return [e for e in events if all(e.get(key) == value for key, value in criteria.items())]


def trace_run(events, run_id):
    """Time-ordered events of one run and the components involved"""
    trace = sorted(search_events(events, run_id=run_id), key=lambda e: e.get('timestamp', ''))
    return {
        'run_id': run_id,
        'trace': trace,
        'components_involved': sorted({e['component'] for e in trace if e.get('component')}),
    }
