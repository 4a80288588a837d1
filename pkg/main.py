"""
Command-line frontend for the RV32IM concolic engine.

Modes:
  concrete  run the image once on the plain interpreter
  explore   enumerate paths with the concolic explorer and write a report
  bench     run the benchmark suite R times and print a timing table
  serve     start the read-only report API (app.py) with uvicorn

Runs can be recorded in a SQLite store (--db or RV32C_DB). The store keeps
one row per exploration session, one row per program run and an audit log of
(event, details) pairs.
"""

import argparse
import json
import os
import sqlite3
import statistics
import sys
import time
from dataclasses import dataclass, fields
from datetime import datetime
from typing import Any, Dict, List, Optional

from loguru import logger

from engine import DEFAULT_SYMBOLIC_BUDGET, ConcreteInterpreter, Fault
from errors import BadImage, ConfigError, EngineError
from explorer import ExploreLimits, RunRecord, explore, prepare
from machine import STACK_TOP, validate_image

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
CONFIG_PATH = os.path.join(BASE_DIR, 'config.json')
BENCH_DIR = os.path.join(BASE_DIR, 'benchmarks')
DB_PATH = os.environ.get('RV32C_DB') or os.path.join(BASE_DIR, 'runs.db')

MODES = ('concrete', 'explore', 'bench', 'serve')
SOLVER_BACKENDS = ('z3',)


@dataclass
class Config:
    image: Optional[str] = None
    mode: str = 'explore'
    stack_top: int = STACK_TOP
    step_limit: int = 10 ** 7
    symbolic_budget: int = DEFAULT_SYMBOLIC_BUDGET
    max_paths: int = 1_000_000
    max_runs: int = 1_000_000
    query_timeout_s: float = 30.0
    strict_memory: bool = False
    dump_smt: Optional[str] = None
    report_path: Optional[str] = None
    solver_backend: str = 'z3'
    solver_seed: int = 0
    db_path: Optional[str] = None
    verbose: bool = False
    repetitions: int = 5
    host: str = '127.0.0.1'
    port: int = 8000

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f'unknown mode {self.mode!r}')
        for name in ('step_limit', 'symbolic_budget', 'max_paths', 'max_runs', 'repetitions'):
            if getattr(self, name) <= 0:
                raise ConfigError(f'{name} must be > 0')
        if self.query_timeout_s <= 0:
            raise ConfigError('query_timeout_s must be > 0')
        if self.stack_top % 4 or not 0 < self.stack_top <= 0xFFFFFFFC:
            raise ConfigError(f'stack_top 0x{self.stack_top:x} must be 4-aligned and within 32 bits')
        if self.solver_backend not in SOLVER_BACKENDS:
            raise ConfigError(f'unsupported solver backend {self.solver_backend!r}')
        return self

    def limits(self) -> ExploreLimits:
        return ExploreLimits(
            max_paths=self.max_paths,
            max_runs=self.max_runs,
            query_timeout_s=self.query_timeout_s,
            step_limit=self.step_limit,
            symbolic_budget=self.symbolic_budget,
        )


def load_config(path: str = None) -> Dict[str, Any]:
    """Load a JSON config file. Missing files are not an error."""
    path = path or CONFIG_PATH
    if not os.path.exists(path):
        return {'ok': True, 'reason': 'no config file', 'config': {}}
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except (OSError, ValueError) as e:
        return {'ok': False, 'reason': f'cannot read {path}: {e}', 'config': {}}
    if not isinstance(data, dict):
        return {'ok': False, 'reason': f'{path} must hold a JSON object', 'config': {}}
    known = {f.name for f in fields(Config)}
    unknown = sorted(set(data) - known)
    if unknown:
        return {'ok': False, 'reason': f'unknown config keys: {", ".join(unknown)}', 'config': {}}
    return {'ok': True, 'reason': '', 'config': data}


def build_config(args: argparse.Namespace, environ=None) -> Config:
    """defaults < config file < environment < flags"""
    environ = os.environ if environ is None else environ
    cfg = Config()
    loaded = load_config(args.config)
    if not loaded['ok']:
        raise ConfigError(loaded['reason'])
    for key, value in loaded['config'].items():
        setattr(cfg, key, value)
    if environ.get('RV32C_DB'):
        cfg.db_path = environ['RV32C_DB']
    for f in fields(Config):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    return cfg.validate()


# -- run store ---------------------------------------------------------------

def init_db(db_path: str = None):
    """Initialise the SQLite database and create tables if they don't exist."""
    conn = sqlite3.connect(db_path or DB_PATH)
    cur = conn.cursor()
    cur.execute('''CREATE TABLE IF NOT EXISTS sessions (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        image TEXT,
        mode TEXT,
        started_ts TEXT,
        finished_ts TEXT,
        summary TEXT
    )''')
    cur.execute('''CREATE TABLE IF NOT EXISTS runs (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        session_id INTEGER,
        run_id INTEGER,
        status TEXT,
        steps INTEGER,
        trace_len INTEGER,
        inputs TEXT,
        decisions TEXT
    )''')
    cur.execute('CREATE INDEX IF NOT EXISTS idx_runs_session ON runs (session_id, run_id)')
    cur.execute('''CREATE TABLE IF NOT EXISTS logs (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        event TEXT,
        details TEXT,
        timestamp DATETIME DEFAULT CURRENT_TIMESTAMP
    )''')
    conn.commit()
    conn.close()


def log_event(event: str, details: str, db_path: str = None):
    conn = sqlite3.connect(db_path or DB_PATH)
    conn.execute('INSERT INTO logs (event, details) VALUES (?, ?)', (event, details))
    conn.commit()
    conn.close()


def start_session(image: str, mode: str, db_path: str = None) -> int:
    conn = sqlite3.connect(db_path or DB_PATH)
    cur = conn.cursor()
    cur.execute('INSERT INTO sessions (image, mode, started_ts) VALUES (?, ?, ?)',
                (image, mode, datetime.now().isoformat(timespec='seconds')))
    session_id = cur.lastrowid
    conn.commit()
    conn.close()
    return session_id


def record_run(session_id: int, record: RunRecord, db_path: str = None):
    conn = sqlite3.connect(db_path or DB_PATH)
    conn.execute(
        'INSERT INTO runs (session_id, run_id, status, steps, trace_len, inputs, decisions) '
        'VALUES (?, ?, ?, ?, ?, ?, ?)',
        (session_id, record.run_id, record.status, record.steps, record.trace_len,
         json.dumps(record.to_json()['inputs']), record.decisions),
    )
    conn.commit()
    conn.close()


def finish_session(session_id: int, summary: dict, db_path: str = None):
    conn = sqlite3.connect(db_path or DB_PATH)
    conn.execute('UPDATE sessions SET finished_ts = ?, summary = ? WHERE id = ?',
                 (datetime.now().isoformat(timespec='seconds'), json.dumps(summary), session_id))
    conn.commit()
    conn.close()


# -- modes -------------------------------------------------------------------

def read_image(path: str) -> bytes:
    with open(path, 'rb') as f:
        return f.read()


def run_concrete(cfg: Config) -> int:
    state = prepare(read_image(cfg.image), stack_top=cfg.stack_top, strict_memory=cfg.strict_memory)
    result = ConcreteInterpreter(state, step_limit=cfg.step_limit,
                                 symbolic_budget=cfg.symbolic_budget).run()
    print(f'status: {result.status}')
    print(f'steps: {result.steps}')
    if result.output:
        print('output: ' + result.output.decode('latin-1'))
    if cfg.db_path:
        init_db(cfg.db_path)
        log_event('concrete-run', f'{cfg.image}: {result.status} steps={result.steps}', cfg.db_path)
    return 1 if isinstance(result.status, Fault) else 0


def run_explore(cfg: Config) -> int:
    session_id = None
    on_run = None
    if cfg.db_path:
        init_db(cfg.db_path)
        session_id = start_session(cfg.image, 'explore', cfg.db_path)

        def on_run(record):
            record_run(session_id, record, cfg.db_path)

    report = explore(
        read_image(cfg.image), cfg.limits(), stack_top=cfg.stack_top,
        strict_memory=cfg.strict_memory, seed=cfg.solver_seed, dump_smt=cfg.dump_smt, on_run=on_run,
    )
    if cfg.report_path:
        report.write(cfg.report_path)
        logger.info('report written to {}', cfg.report_path)
    else:
        for line in report.to_lines():
            print(line)
    if session_id is not None:
        for event, details in report.events:
            log_event(event, details, cfg.db_path)
        finish_session(session_id, report.summary(), cfg.db_path)
    return 0


@dataclass
class BenchmarkSpec:
    name: str
    source: str
    symbolic_len: int
    expected_paths: Optional[int] = None
    image: str = ''

    def __post_init__(self):
        if not self.image:
            self.image = os.path.join(BENCH_DIR, 'bin', f'{self.name}.elf')


# Expected counts: n! for the sorts over pairwise-distinct bytes, 5^4 for one
# base64 group (four sextets, five output classes each).
DEFAULT_SUITE = [
    BenchmarkSpec('bubble-sort-3', 'bubble-sort.c', 3, 6),
    BenchmarkSpec('bubble-sort-4', 'bubble-sort.c', 4, 24),
    BenchmarkSpec('bubble-sort-5', 'bubble-sort.c', 5, 120),
    BenchmarkSpec('insertion-sort-3', 'insertion-sort.c', 3, 6),
    BenchmarkSpec('insertion-sort-4', 'insertion-sort.c', 4, 24),
    BenchmarkSpec('insertion-sort-5', 'insertion-sort.c', 5, 120),
    BenchmarkSpec('is-prime', 'is-prime.c', 1),
    BenchmarkSpec('base64-encode', 'base64-encode.c', 3, 625),
    BenchmarkSpec('uri-parser', 'uri-parser.c', 5, 60),
]
FULL_SUITE = DEFAULT_SUITE + [
    BenchmarkSpec('bubble-sort-6', 'bubble-sort.c', 6, 720),
    BenchmarkSpec('insertion-sort-7', 'insertion-sort.c', 7, 5040),
]


def run_benchmarks(suite: List[BenchmarkSpec], cfg: Config) -> List[dict]:
    """Explore every benchmark cfg.repetitions times; one row per benchmark."""
    rows = []
    for spec in suite:
        image = read_image(spec.image)
        times, counts, notes = [], set(), []
        for _ in range(cfg.repetitions):
            started = time.perf_counter()
            report = explore(image, cfg.limits(), stack_top=cfg.stack_top,
                             strict_memory=cfg.strict_memory, seed=cfg.solver_seed)
            times.append(time.perf_counter() - started)
            counts.add(report.paths_completed)
            if not report.exhausted:
                notes.append(f'truncated: {report.stop_reason}')
            if report.paths_truncated:
                notes.append(f'{report.paths_truncated} step-limited paths')
        paths = max(counts)
        ok = not notes
        if len(counts) > 1:
            ok = False
            notes.append(f'path counts differ across repetitions: {sorted(counts)}')
        if spec.expected_paths is not None and paths != spec.expected_paths:
            ok = False
            notes.append(f'expected {spec.expected_paths} paths')
        rows.append({
            'name': spec.name,
            'paths': paths,
            'expected': spec.expected_paths,
            'mean_s': statistics.mean(times),
            'stdev_s': statistics.pstdev(times),
            'ok': ok,
            'note': '; '.join(sorted(set(notes))),
        })
        logger.info('{}: {} paths, mean {:.3f}s', spec.name, paths, rows[-1]['mean_s'])
    return rows


def format_table(rows: List[dict]) -> str:
    lines = ['name\tpaths\texpected\tmean_s\tstdev_s\tok\tnote']
    for r in rows:
        expected = '-' if r['expected'] is None else str(r['expected'])
        lines.append(f"{r['name']}\t{r['paths']}\t{expected}\t{r['mean_s']:.4f}\t"
                     f"{r['stdev_s']:.4f}\t{'yes' if r['ok'] else 'no'}\t{r['note']}")
    return '\n'.join(lines)


def run_bench(cfg: Config, only: List[str] = None, full: bool = False) -> int:
    suite = FULL_SUITE if full else DEFAULT_SUITE
    if only:
        suite = [s for s in suite if s.name in only]
        if not suite:
            print('no benchmark matches ' + ', '.join(only), file=sys.stderr)
            return 2
    rows = run_benchmarks(suite, cfg)
    print(format_table(rows))
    print(json.dumps(rows))
    if cfg.report_path:
        with open(cfg.report_path, 'w') as f:
            json.dump(rows, f, indent=2)
    return 0 if all(r['ok'] for r in rows) else 1


def run_serve(cfg: Config) -> int:
    import uvicorn

    # app.py reads the store path from the imported module, which is a
    # different object from __main__ when run as a script
    import main as store
    if cfg.db_path:
        store.DB_PATH = cfg.db_path
    from app import app
    uvicorn.run(app, host=cfg.host, port=cfg.port)
    return 0


def _int_auto(text: str) -> int:
    return int(text, 0)


def build_parser() -> argparse.ArgumentParser:
    epilog = (
        "Examples:\n"
        "  python main.py --mode concrete benchmarks/bin/selftest.elf\n"
        "      Run once on the concrete interpreter and print status, steps and output.\n\n"
        "  python main.py --mode explore --max-paths 10 --report out.jsonl benchmarks/bin/bubble-sort-3.elf\n"
        "      Explore paths and write one JSON line per run plus a summary line.\n\n"
        "  python main.py --mode bench --repetitions 5 --only bubble-sort-4\n"
        "      Time the benchmark suite and compare path counts with the expected ones.\n"
    )
    parser = argparse.ArgumentParser(
        description='Concolic execution engine for RV32IM ELF binaries',
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument('image', nargs='?', help='RV32IM ELF executable')
    parser.add_argument('--mode', choices=MODES, help='concrete, explore (default), bench or serve')
    parser.add_argument('--config', help='JSON config file (default: config.json next to main.py)')
    parser.add_argument('--stack-top', dest='stack_top', type=_int_auto, help='initial sp (default 0x80000000)')
    parser.add_argument('--step-limit', dest='step_limit', type=int, help='instructions per run')
    parser.add_argument('--symbolic-budget', dest='symbolic_budget', type=int,
                        help='symbolic input bytes per run (default 65536)')
    parser.add_argument('--max-paths', dest='max_paths', type=int, help='stop after this many completed paths')
    parser.add_argument('--max-runs', dest='max_runs', type=int, help='stop after this many runs')
    parser.add_argument('--query-timeout', dest='query_timeout_s', type=float, help='seconds per solver query')
    parser.add_argument('--strict-memory', dest='strict_memory', action='store_true', default=None,
                        help='fault on accesses outside loaded segments and the stack')
    parser.add_argument('--dump-smt', dest='dump_smt', help='write every solver query as .smt2 into this directory')
    parser.add_argument('--report', dest='report_path', help='write the report here instead of stdout')
    parser.add_argument('--solver', dest='solver_backend', choices=SOLVER_BACKENDS, help='solver backend')
    parser.add_argument('--seed', dest='solver_seed', type=int, help='solver random seed')
    parser.add_argument('--db', dest='db_path', help='record sessions and runs in this SQLite file')
    parser.add_argument('--verbose', action='store_true', default=None, help='debug logging')
    parser.add_argument('--repetitions', type=int, help='bench: explorations per benchmark (default 5)')
    parser.add_argument('--only', action='append', help='bench: run only this benchmark (repeatable)')
    parser.add_argument('--full', action='store_true', help='bench: include bubble-sort-6 and insertion-sort-7')
    parser.add_argument('--host', help='serve: bind address')
    parser.add_argument('--port', type=int, help='serve: port')
    return parser


def setup_logging(verbose: bool):
    logger.remove()
    logger.add(sys.stderr, level='DEBUG' if verbose else 'INFO')


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    try:
        cfg = build_config(args)
    except ConfigError as e:
        print(f'error: {e}', file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    setup_logging(cfg.verbose)

    if cfg.mode == 'serve':
        return run_serve(cfg)
    if cfg.mode == 'bench':
        return run_bench(cfg, only=args.only, full=args.full)

    if not cfg.image:
        print('error: an image is required for this mode', file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    checked = validate_image(cfg.image)
    if not checked['ok']:
        print(f"error: {checked['reason']}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2

    try:
        if cfg.mode == 'concrete':
            return run_concrete(cfg)
        return run_explore(cfg)
    except BadImage as e:
        print(f'error: {e}', file=sys.stderr)
        return 2
    except EngineError as e:
        logger.error('engine error: {}', e)
        if cfg.db_path:
            log_event('engine-error', str(e), cfg.db_path)
        return 1


if __name__ == '__main__':
    sys.exit(main())
