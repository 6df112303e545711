"""
Kimura Boundary Lab
Copyright (c) 2025 Abhishek Datta

Licensed under the MIT License.
See LICENSE file in the project root for full license information.

This file is part of the Kimura Boundary Lab,
a desk-scale numerical laboratory for degenerate diffusion operators.
"""

"""
Master Orchestrator
One-command experiment pipeline: validate -> solve -> oracles -> harness
Coordinates config, catalog, bundle writing and the subcommand CLI
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone

from experiment_config import (HARNACK_TAGS, ConfigError, ExperimentSpec, config_hash, dump_config, load_config,
                               resolve_settings, with_overrides)
from experiments import NEEDS_TRAJECTORY, ExperimentContext, run_experiment
from operator_core import validate
from persistence import trajectory_cache_dir
from report_bundle import (BundleError, BundleWriter, build_report, compare_bundles, load_report, render_comparison,
                           render_text)
from run_logger import StructuredLogger, configure_logging

logger = logging.getLogger(__name__)

ORACLE_TAGS = ('monte_carlo',)


class Colors:
    """ANSI color codes for terminal output"""
    HEADER = '\033[95m'
    BLUE = '\033[94m'
    CYAN = '\033[96m'
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    RED = '\033[91m'
    ENDC = '\033[0m'
    BOLD = '\033[1m'


def print_header(text):
    print(f"\n{Colors.BOLD}{Colors.BLUE}{'=' * 60}")
    print(f"{text}")
    print(f"{'=' * 60}{Colors.ENDC}\n")


def print_step(step_num, text):
    print(f"\n{Colors.CYAN}{Colors.BOLD}[Step {step_num}] {text}{Colors.ENDC}")
    print(f"{Colors.CYAN}{'-' * 60}{Colors.ENDC}")


def print_success(text):
    print(f"{Colors.GREEN}✓ {text}{Colors.ENDC}")


def print_error(text):
    print(f"{Colors.RED}✗ {text}{Colors.ENDC}")


def print_warning(text):
    print(f"{Colors.YELLOW}⚠ {text}{Colors.ENDC}")


def select_experiments(command, config):
    """Experiments a subcommand runs, in config order"""
    specs = list(config.experiments)
    if command == 'verify':
        return [s for s in specs if s.tag not in HARNACK_TAGS and s.tag not in ORACLE_TAGS]
    if command == 'harnack':
        return [s for s in specs if s.tag in HARNACK_TAGS]
    if command == 'mc-compare':
        chosen = [s for s in specs if s.tag in ORACLE_TAGS]
        return chosen or [ExperimentSpec(tag='monte_carlo')]
    if command == 'run':
        return specs
    return []


class LabOrchestrator:
    """Runs one subcommand against one config and writes its bundle"""

    def __init__(self, command, config, threads=None, output_dir=None):
        self.command = command
        self.config = config
        self.settings = resolve_settings(config, threads, output_dir)
        self.config_hash = config_hash(config)
        self.start_time = datetime.now(timezone.utc)
        self.bundle = BundleWriter(self.settings.output_dir, command, self.config_hash)
        self.events = StructuredLogger('orchestrator', self.config_hash, self.bundle.run_log_path)
        self.context = ExperimentContext(
            config, threads=self.settings.threads, logger=self.events.child('experiments'),
            cache_dir=trajectory_cache_dir(self.settings.output_dir, self.config_hash),
            artifact_dir=os.path.join(self.bundle.path, 'ensembles'))
        self.results = {'validate': False}
        self.errors = []
        self.validation = None
        self.reports = []

    def run_validation(self, step):
        print_step(step, "Validate - Operator Structure")
        self.validation = validate(self.context.op)
        self.bundle.write_json('validation.json', self.validation.to_dict())
        for check in self.validation.checks:
            (print_success if check.passed else print_error)(
                f"{check.name}: worst violation {check.worst_violation:.3e}")
        self.events.info("Validation finished", passed=self.validation.passed)
        self.results['validate'] = self.validation.passed
        if not self.validation.passed:
            self.errors.append(f"Validation failed: {', '.join(self.validation.failures())}")
        return self.validation.passed

    def run_solves(self, step, specs, force=False):
        """Solve every refinement trajectory the experiments need, serially, before the pool starts"""
        if not force and not any(s.tag in NEEDS_TRAJECTORY for s in specs):
            return False
        print_step(step, "Solve - Refinement Trajectories")
        count = self.context.initial_data_count()
        if any(s.tag in HARNACK_TAGS for s in specs):
            count = max(count, 2)
        for index in range(count):
            for traj in self.context.refinement_trajectories(index):
                print_success(f"datum {index} on {'x'.join(map(str, traj.grid.shape))}: "
                              f"{len(traj)} snapshots to t={traj.times[-1]:.3g}")
        self.events.info("Trajectories ready", data=count, cache=self.context.cache_dir)
        self.results['solve'] = True
        return True

    def run_experiments(self, step, title, specs):
        if not specs:
            return []
        print_step(step, title)
        with ThreadPoolExecutor(max_workers=self.settings.threads) as pool:
            reports = list(pool.map(lambda s: run_experiment(self.context, s, self.config_hash), specs))
        for report in reports:
            if report.verdict == 'FAIL':
                print_error(f"{report.tag}: FAIL {'; '.join(report.flags)}")
            elif report.verdict == 'PASS':
                print_success(f"{report.tag}: PASS")
            else:
                print_warning(f"{report.tag}: {report.verdict}")
        self.reports.extend(reports)
        return reports

    def execute(self):
        """Pipeline for the command; returns the exit status"""
        print_header(f"🚀 KIMURA LAB - {self.command} ({self.config_hash[:8]})")
        print(f"{Colors.BOLD}Bundle:{Colors.ENDC} {self.bundle.path}")
        self.events.info("Run started", command=self.command, threads=self.settings.threads)
        self.bundle.write_text('config.json', dump_config(self.config) + '\n')
        stage = 'validate'
        try:
            if not self.run_validation(1):
                return self.finish(failed_stage='validate')
            specs = select_experiments(self.command, self.config)
            stage = 'solve'
            self.run_solves(2, list(self.config.experiments) if self.command == 'solve' else specs,
                            force=self.command == 'solve')
            stage = 'oracles'
            self.run_experiments(3, "Oracles - Monte Carlo Cross-Checks", [s for s in specs if s.tag in ORACLE_TAGS])
            stage = 'harness'
            self.run_experiments(4, "Harness - Estimates", [s for s in specs if s.tag not in ORACLE_TAGS])
        except (BundleError, KeyboardInterrupt):
            raise
        except Exception as exc:
            logger.exception("stage %s failed", stage)
            self.errors.append(f"{stage}: {exc}")
            self.events.error("Stage failed", stage=stage, error=str(exc))
            self.bundle.fail(stage, exc)
            self.generate_final_report(1)
            return 1
        return self.finish()

    def finish(self, failed_stage=None):
        report = build_report(self.command, self.config, self.config_hash, self.reports, self.validation,
                              self.start_time.isoformat())
        self.bundle.write_report(report)
        status = report['exit_status']
        self.events.info("Run finished", exit_status=status)
        if failed_stage:
            self.bundle.fail(failed_stage, RuntimeError('; '.join(self.errors)))
        else:
            self.bundle.complete()
        self.generate_final_report(status)
        return status

    def generate_final_report(self, status):
        print_header("📊 EXECUTION SUMMARY")
        duration = (datetime.now(timezone.utc) - self.start_time).total_seconds()
        print(f"{Colors.BOLD}Execution Time:{Colors.ENDC} {duration:.2f} seconds")
        print(f"{Colors.BOLD}Config Hash:{Colors.ENDC} {self.config_hash}")
        print()
        print(f"{Colors.BOLD}Experiment Results:{Colors.ENDC}")
        for report in self.reports:
            colour = Colors.GREEN if report.verdict in ('PASS', 'VACUOUS_PASS') else (
                Colors.RED if report.verdict == 'FAIL' else Colors.YELLOW)
            print(f"  {report.tag}: {colour}{report.verdict}{Colors.ENDC}")
        print()
        if status == 0:
            print(f"{Colors.GREEN}{Colors.BOLD}🎉 ALL EXPERIMENTS PASSED{Colors.ENDC}")
        else:
            print(f"{Colors.RED}{Colors.BOLD}⚠️  RUN COMPLETED WITH FAILURES{Colors.ENDC}")
            for error in self.errors:
                print(f"  • {error}")
        print(f"\n{Colors.BOLD}📁 Bundle:{Colors.ENDC} {Colors.CYAN}{self.bundle.path}{Colors.ENDC}")
        print(f"\n{Colors.BLUE}{'=' * 60}{Colors.ENDC}\n")


def command_report(args):
    """Render a bundle, or compare it against a baseline bundle"""
    current = load_report(args.path)
    if args.baseline:
        baseline = load_report(args.baseline)
        comparison = compare_bundles(baseline, current, args.tolerance)
        print(render_comparison(comparison, args.baseline, args.path))
        return 1 if comparison.severity in ('HIGH', 'CRITICAL') else 0
    print(render_text(current))
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='experiment config (JSON)')
    common.add_argument('--out', help='output root (default: config, then KIMURA_LAB_OUT, then lab_runs)')
    common.add_argument('--seed', type=int, help='override the config seed')
    common.add_argument('--threads', type=int, help='worker count (default: config, then KIMURA_LAB_THREADS)')
    common.add_argument('--grid-override', type=int, dest='grid_override', help='override the base node count')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    parser = argparse.ArgumentParser(prog='master_orchestrator.py',
                                     description='Kimura Boundary Lab experiment driver')
    commands = parser.add_subparsers(dest='command', required=True)
    commands.add_parser('validate', parents=[common], help='check the operator structure')
    commands.add_parser('solve', parents=[common], help='solve and cache the refinement trajectories')
    commands.add_parser('verify', parents=[common], help='run the non-Harnack harness experiments')
    commands.add_parser('harnack', parents=[common], help='run the Harnack-type experiments')
    commands.add_parser('mc-compare', parents=[common], help='run the Monte Carlo cross-checks')
    commands.add_parser('run', parents=[common], help='full pipeline')
    report = commands.add_parser('report', help='render a bundle or compare two')
    report.add_argument('path', help='bundle directory or report.json')
    report.add_argument('--baseline', help='baseline bundle to compare against')
    report.add_argument('--tolerance', type=float, default=0.05, help='relative drift tolerance')
    report.add_argument('--verbose', action='store_true', help='debug logging')
    return parser


def main(argv=None):
    """Main entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        if args.command == 'report':
            return command_report(args)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        config = load_config(args.config)
        if args.seed is not None or args.grid_override is not None:
            config = with_overrides(config, seed=args.seed, grid_nodes=args.grid_override)
        orchestrator = LabOrchestrator(args.command, config, args.threads, args.out)
        return orchestrator.execute()
    except KeyboardInterrupt:
        print(f"\n\n{Colors.YELLOW}⚠️  Run interrupted by user{Colors.ENDC}\n")
        return 130
    except ConfigError as exc:
        print_error(str(exc))
        return 2
    except FileNotFoundError as exc:
        print_error(f"file not found: {exc.filename or exc}")
        return 1
    except BundleError as exc:
        print_error(str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
