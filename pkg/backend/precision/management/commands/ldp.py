import json
import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from precision.config import parse_and_validate
from precision.exceptions import LDPError
from precision.models import TrainingRun
from precision.training import (
    evaluate,
    run_cost_report,
    run_replay,
    run_sweep,
    train,
    write_cost_report,
)

logger = logging.getLogger('precision.commands')


def parse_values(text):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError as exc:
        raise CommandError(f"--values must be a comma-separated list of numbers, got '{text}'") from exc


class Command(BaseCommand):
    help = 'Train, evaluate, sweep and replay learnable-precision runs, and report their BitOPs'

    def add_arguments(self, parser):
        subcommands = parser.add_subparsers(dest='subcommand', required=True)

        train_parser = subcommands.add_parser('train', help='Train one run from a config file')
        train_parser.add_argument('--config', required=True)
        train_parser.add_argument('--out', help='Output directory (overrides train.output_dir)')
        train_parser.add_argument('--record', action='store_true', help='Store a TrainingRun row')

        eval_parser = subcommands.add_parser('eval', help='Evaluate a checkpoint')
        eval_parser.add_argument('--checkpoint', required=True)
        eval_parser.add_argument('--data', help='Directory holding t10k IDX files (default: the run\'s test split)')
        eval_parser.add_argument('--bits', type=int, help='Force this bit-width on every quantized layer')
        eval_parser.add_argument('--out', help='Directory to write eval.json into')

        sweep_parser = subcommands.add_parser('sweep', help='One run per value of a numeric config parameter')
        sweep_parser.add_argument('--config', required=True)
        sweep_parser.add_argument('--param', required=True, help='Dotted config path, e.g. precision.t_frac')
        sweep_parser.add_argument('--values', required=True, help='Comma-separated list, e.g. 0.5,0.6,0.7')
        sweep_parser.add_argument('--out')
        sweep_parser.add_argument('--record', action='store_true')

        replay_parser = subcommands.add_parser('replay', help='Train with bits forced from a schedule log')
        replay_parser.add_argument('--config', required=True)
        replay_parser.add_argument('--schedule', required=True, help='schedule.csv of an earlier run')
        replay_parser.add_argument('--out')
        replay_parser.add_argument('--record', action='store_true')

        report_parser = subcommands.add_parser('cost-report', help='Static per-layer cost analysis')
        report_parser.add_argument('--config', required=True)
        report_parser.add_argument('--out')

    def handle(self, *args, **options):
        handler = {
            'train': self.handle_train,
            'eval': self.handle_eval,
            'sweep': self.handle_sweep,
            'replay': self.handle_replay,
            'cost-report': self.handle_cost_report,
        }[options['subcommand']]
        try:
            handler(options)
        except LDPError as exc:
            logger.error(f"ldp {options['subcommand']} failed: {exc}")
            raise CommandError(str(exc)) from exc

    def load_config(self, options):
        cfg = parse_and_validate(options['config'])
        if options.get('out') and options['subcommand'] in ('train', 'replay'):
            cfg = cfg.with_output_dir(options['out'])
        return cfg

    def write_paths(self, paths):
        for path in paths:
            self.stdout.write(str(path))

    def record(self, options, artifacts):
        if options.get('record'):
            run = TrainingRun.from_artifacts(artifacts)
            self.stderr.write(self.style.SUCCESS(f"Recorded training run {run.pk}"))

    def handle_train(self, options):
        cfg = self.load_config(options)
        artifacts = train(cfg)
        self.record(options, artifacts)
        self.write_paths(artifacts.paths)

    def handle_eval(self, options):
        result = evaluate(options['checkpoint'], bits=options.get('bits'), data_dir=options.get('data'))
        self.stdout.write(json.dumps(result, indent=2, sort_keys=True))
        if options.get('out'):
            out = Path(options['out'])
            out.mkdir(parents=True, exist_ok=True)
            path = out / 'eval.json'
            path.write_text(json.dumps(result, indent=2, sort_keys=True))
            self.write_paths([path])

    def handle_sweep(self, options):
        cfg = self.load_config(options)
        values = parse_values(options['values'])
        if not values:
            raise CommandError('--values is empty')
        artifacts, summary_path = run_sweep(cfg, options['param'], values, options.get('out'))
        for run in artifacts:
            self.record(options, run)
            self.write_paths(run.paths)
        self.write_paths([summary_path])

    def handle_replay(self, options):
        cfg = self.load_config(options)
        artifacts = run_replay(cfg, options['schedule'])
        self.record(options, artifacts)
        self.write_paths(artifacts.paths)

    def handle_cost_report(self, options):
        cfg = self.load_config(options)
        layers, totals = run_cost_report(cfg)
        self.stdout.write(layers.to_string(index=False))
        for key, value in totals.items():
            self.stdout.write(f"{key}: {value}")
        out = Path(options['out']) if options.get('out') else cfg.output_dir
        self.write_paths(write_cost_report(layers, totals, out))
