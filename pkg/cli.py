"""
cli.py
──────
Command line entry point.

    python cli.py solve ieee30_mod [--mode Mode1] [--dump-basis DIR]
    python cli.py gen   ieee30_mod --count 2000 --seed 42 --out data.csv
    python cli.py train ieee30_mod --data data.csv --all-modes --out-bank bank.json
    python cli.py eval  ieee30_mod --bank bank.json --data data.csv --out-dir out
    python cli.py bench ieee30_mod --bank bank.json --data data.csv --repeats 3
    python cli.py trip  ieee30_mod --bank bank.json --data data.csv --branch 1,3

Exit codes: 0 ok, 2 bad input, 3 solver / training failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import pandas as pd

from core.acdc_solver import power_balance, solution_to_dict, solve_acdc_sequential
from core.config import configure_logging, load_run_config
from core.errors import INPUT_ERRORS, SOLVE_ERRORS, ValidationError
from core.evaluator import bench_time, evaluate, topology_study
from core.graph_builder import build_topology, dump_basis, spectral_basis
from core.models import ControlMode
from core.scenarios import generate_mode_scenarios, generate_scenarios, load_scenarios, save_scenarios, split_dataset
from core.trainer import (
    BankEntry, ModelBank, alm_train, load_bank, prepare_dataset, save_bank, train_all_modes,
)
from parsers.detector import load_case

logger = logging.getLogger('acdcflow.cli')

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_SOLVE = 0, 1, 2, 3


# ── Shared arguments ──────────────────────────────────────
parent_parser = argparse.ArgumentParser(add_help=False)
parent_parser.add_argument('case', help="bundled case name or path to a case JSON file")
parent_parser.add_argument('--config', help="JSON run config (see RunConfig)")
parent_parser.add_argument('--verbose', '-v', action='store_true')


def _mode(value: str) -> ControlMode:
    try:
        return ControlMode(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"mode must be one of {[m.value for m in ControlMode]}")


def _branch(value: str) -> tuple:
    try:
        a, b = (int(x) for x in value.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError("branch must look like A,B")
    return a, b


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='acdcflow', description="AC/DC power flow: oracle and PG-GNN")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('solve', parents=[parent_parser], help="sequential oracle solve")
    p.add_argument('--mode', type=_mode, help="force a control mode (default: switch on demand)")
    p.add_argument('--out', help="write the solution JSON here instead of stdout")
    p.add_argument('--dump-basis', dest='dump_basis', help="write Laplacian / Chebyshev CSVs here")

    p = sub.add_parser('gen', parents=[parent_parser], help="generate oracle-checked scenarios")
    p.add_argument('--count', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--out', required=True)
    p.add_argument('--per-mode', type=int, dest='per_mode',
                   help="build a mode-labelled set with this many scenarios per mode")

    p = sub.add_parser('train', parents=[parent_parser], help="train one or all mode networks")
    p.add_argument('--data', required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument('--mode', type=_mode)
    group.add_argument('--all-modes', action='store_true', dest='all_modes')
    p.add_argument('--out-bank', dest='out_bank')
    p.add_argument('--log-dir', dest='log_dir')
    p.add_argument('--no-edge-features', action='store_true', dest='no_edge_features')
    p.add_argument('--raw-angles', action='store_true', dest='raw_angles')

    for name, helptext in (('eval', "metrics against the oracle"), ('bench', "timing comparison"),
                           ('trip', "branch trip study")):
        p = sub.add_parser(name, parents=[parent_parser], help=helptext)
        p.add_argument('--bank')
        p.add_argument('--data', required=True)
        p.add_argument('--out-dir', dest='out_dir')
        if name == 'bench':
            p.add_argument('--repeats', type=int, default=3)
        if name == 'trip':
            p.add_argument('--branch', type=_branch, required=True)
    return parser


# ═══════════════════════════════════════════════════════════
#  COMMANDS
# ═══════════════════════════════════════════════════════════

def cmd_solve(args, run):
    case = load_case(args.case)
    sol = solve_acdc_sequential(case, mode=args.mode, tap_priority=run.tap_priority)
    payload = solution_to_dict(sol, case)
    payload['power_balance'] = power_balance(case, sol)
    text = json.dumps(payload, indent=2)
    if args.out:
        with open(args.out, 'w', encoding='utf-8') as fh:
            fh.write(text)
    else:
        print(text)
    if args.dump_basis:
        basis = spectral_basis(build_topology(case), run.train.order)
        dump_basis(basis, args.dump_basis)
    return EXIT_OK


def cmd_gen(args, run):
    case = load_case(args.case)
    if args.per_mode:
        scenarios = generate_mode_scenarios(case, args.per_mode, run.seed, run.rect_stress_q)
    else:
        scenarios = generate_scenarios(case, run.count, run.seed, run.rect_stress_prob, run.rect_stress_q,
                                       max_attempts=run.max_attempts, tap_priority=run.tap_priority)
    save_scenarios(scenarios, case, args.out)
    return EXIT_OK


def _train_split(case, path, run):
    train, test = split_dataset(load_scenarios(path, case), run.split, run.seed)
    return train, test


def cmd_train(args, run):
    case = load_case(args.case)
    train, _ = _train_split(case, args.data, run)
    dataset = prepare_dataset(case, train)
    cfg = run.train
    if args.no_edge_features or args.raw_angles:
        cfg = replace(cfg, use_edge_features=cfg.use_edge_features and not args.no_edge_features,
                      raw_angles=cfg.raw_angles or args.raw_angles)

    if args.all_modes:
        bank = train_all_modes(dataset, case, cfg)
        logs = bank.logs
    else:
        result = alm_train(dataset, case, args.mode, cfg)
        bank_path = args.out_bank or run.bank_path
        bank = load_bank(bank_path) if os.path.isfile(bank_path) else ModelBank()
        bank.entries[args.mode] = BankEntry.from_result(result)
        logs = {args.mode: result.log}

    save_bank(bank, args.out_bank or run.bank_path)
    log_dir = args.log_dir or run.out_dir
    os.makedirs(log_dir, exist_ok=True)
    frames = [df.assign(mode=m.value) for m, df in logs.items()]
    pd.concat(frames, ignore_index=True).to_csv(os.path.join(log_dir, 'training_log.csv'), index=False)
    return EXIT_OK


def _bank_and_test(args, run):
    case = load_case(args.case)
    bank = load_bank(args.bank or run.bank_path)
    _, test = _train_split(case, args.data, run)
    if not test:
        raise ValidationError("test split is empty")
    return case, bank, test


def cmd_eval(args, run):
    case, bank, test = _bank_and_test(args, run)
    report = evaluate(bank, case, test, out_dir=args.out_dir or run.out_dir, policy=run.select_policy)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_bench(args, run):
    case, bank, test = _bank_and_test(args, run)
    stats = bench_time(bank, case, test, repeats=args.repeats, policy=run.select_policy)
    print(json.dumps(stats, indent=2))
    return EXIT_OK


def cmd_trip(args, run):
    case, bank, test = _bank_and_test(args, run)
    study = topology_study(bank, case, args.branch, test, out_dir=args.out_dir or run.out_dir,
                           policy=run.select_policy)
    print(json.dumps({
        'branch':      list(study.branch),
        'degradation': study.degradation,
        'intact':      study.intact.to_dict(),
        'tripped':     study.tripped.to_dict(),
    }, indent=2))
    return EXIT_OK


COMMANDS = {
    'solve': cmd_solve,
    'gen':   cmd_gen,
    'train': cmd_train,
    'eval':  cmd_eval,
    'bench': cmd_bench,
    'trip':  cmd_trip,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        run = load_run_config(args.config, count=getattr(args, 'count', None),
                              seed=getattr(args, 'seed', None))
        return COMMANDS[args.command](args, run)
    except INPUT_ERRORS as e:
        logger.error(f"[cli] {type(e).__name__}: {e}")
        return EXIT_INPUT
    except SOLVE_ERRORS as e:
        logger.error(f"[cli] {type(e).__name__}: {e}")
        return EXIT_SOLVE
    except Exception:
        logger.exception("[cli] unexpected failure")
        return EXIT_FAIL


if __name__ == '__main__':
    sys.exit(main())
