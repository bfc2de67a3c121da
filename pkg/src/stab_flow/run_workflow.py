#!/usr/bin/env python3

"""
The main entry point: `stab simulate | verify | shells | sweep <scenario.toml>`.
"""

import sys
from argparse import ArgumentParser, Namespace

from loguru import logger

from stab_flow.errors import ConfigurationError, StabError
from stab_flow.jobs.suites import SUITES
from stab_flow.scenario import SWEEP_AXES, load_scenario
from stab_flow.stages import cmd_shells, cmd_simulate, cmd_sweep, cmd_verify
from stab_flow.utils import configure_logging


def parse_values(text: str) -> list[float]:
    """Comma-separated numbers; an empty string is an empty list"""
    try:
        return [float(item) for item in text.split(',') if item.strip()]
    except ValueError as err:
        raise ConfigurationError(f'--values must be comma-separated numbers, got {text!r}') from err


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='stab', description='Sample-and-hold stabilization of particle measures')
    commands = parser.add_subparsers(dest='command', required=True)

    def command(name: str, help_text: str) -> ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument('config', help='scenario TOML file')
        sub.add_argument('--out', default='stab_output', help='directory for reports and trajectories')
        sub.add_argument('--seed', type=int, default=None, help='override scenario.seed')
        return sub

    simulate = command('simulate', 'run the closed loop and check the stabilization verdicts')
    simulate.add_argument('--jobs', type=int, default=1, help='accepted for symmetry with sweep')
    verify = command('verify', 'run randomised property suites')
    verify.add_argument('--suite', choices=(*SUITES, 'all'), default='all')
    command('shells', 'build and dump the shell table of the global feedback')
    sweep = command('sweep', 'one simulation per value of a scenario axis')
    sweep.add_argument('--axis', choices=SWEEP_AXES, required=True)
    sweep.add_argument('--values', default='', help='comma-separated axis values, e.g. 25,50,100')
    sweep.add_argument('--jobs', type=int, default=1, help='worker processes')
    return parser


def run(args: Namespace) -> int:
    scenario = load_scenario(args.config)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    if args.command == 'simulate':
        report = cmd_simulate(scenario, args.out)
    elif args.command == 'verify':
        report = cmd_verify(scenario, args.suite, args.out)
    elif args.command == 'shells':
        report = cmd_shells(scenario, args.out)
    else:
        report = cmd_sweep(scenario, args.axis, parse_values(args.values), args.out, args.jobs)
    return report.exit_code


def cli_main(argv: list[str] | None = None) -> None:
    """
    CLI entrypoint, exits 0 when every check passes, 2 on a failed property, 3 on a
    configuration error and 4 when a numerical method does not converge
    """
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        code = run(args)
    except StabError as err:
        logger.error(str(err))
        code = err.exit_code
    sys.exit(code)


if __name__ == '__main__':
    cli_main()
