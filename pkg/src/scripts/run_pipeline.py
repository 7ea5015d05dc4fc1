#!/usr/bin/env python

import argparse
import logging
import os
import sys
import time

from evf.cli import main as evf

logging.basicConfig()
logger = logging.getLogger(os.path.basename(__file__))
logger.setLevel(logging.INFO)

# (subcommand, extra arguments), in dependency order
STAGES = [
    ("gen-data", []),
    ("train", ["--method", "evf"]),
    ("train", ["--method", "no-context"]),
    ("eval", ["--method", "evf"]),
    ("eval", ["--method", "no-context"]),
    ("eval", ["--method", "evf", "--set", "eval.mismatched=true"]),
    ("embed", []),
    ("plan", ["--method", "evf"]),
    ("plan", ["--method", "no-context"]),
    ("plan", ["--method", "no-motion"]),
    ("report", []),
]


def run_stage(command, extra, common):
    argv = [command] + extra + common
    logger.info("evf %s", " ".join(argv))
    start = time.time()
    status = evf(argv)
    logger.info("evf %s done in %.1fs (status %d)", command, time.time() - start, status)
    return status


if __name__ == '__main__':
    parser = argparse.ArgumentParser(
        description='generate data, train, evaluate and benchmark evf and its baselines')
    parser.add_argument('-d', '--data-dir', action='store', help='data and runs root',
                        required=False)
    parser.add_argument('--config', action='store', help='key=value configuration file',
                        required=False)
    parser.add_argument('--seed', action='store', type=int, required=False)
    parser.add_argument('--force', action='store_true', help='overwrite existing outputs')
    parser.add_argument('--skip-data', action='store_true',
                        help='reuse the corpus already in the data dir')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    args = parser.parse_args()

    common = []
    if args.config:
        common += ['--config', args.config]
    if args.seed is not None:
        common += ['--seed', str(args.seed)]
    if args.data_dir:
        common += ['--set', 'data_dir=%s' % os.path.abspath(os.path.expanduser(args.data_dir))]
    for assignment in args.set:
        common += ['--set', assignment]
    if args.force:
        common.append('--force')

    stages = STAGES[1:] if args.skip_data else STAGES
    for command, extra in stages:
        if run_stage(command, extra, common) != 0:
            logger.error("stopping after failed stage %s %s", command, " ".join(extra))
            sys.exit(1)
