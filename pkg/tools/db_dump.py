#!/usr/bin/env python3
"""Print the contents of a run store written by ``main.py --db``."""
import argparse
import os
import sqlite3
import sys

BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DB_PATH = os.environ.get('RV32C_DB') or os.path.join(BASE_DIR, 'runs.db')


def dump(db_path, session=None, out=sys.stdout):
    if not os.path.exists(db_path):
        print('DB not found at', db_path, file=out)
        return 1
    conn = sqlite3.connect(db_path)
    conn.row_factory = sqlite3.Row
    cur = conn.cursor()
    print('Sessions:', file=out)
    if session is None:
        cur.execute('SELECT * FROM sessions ORDER BY id ASC')
    else:
        cur.execute('SELECT * FROM sessions WHERE id = ?', (session,))
    for r in cur.fetchall():
        print(dict(r), file=out)
    print('\nRuns:', file=out)
    if session is None:
        cur.execute('SELECT * FROM runs ORDER BY session_id ASC, run_id ASC')
    else:
        cur.execute('SELECT * FROM runs WHERE session_id = ? ORDER BY run_id ASC', (session,))
    for r in cur.fetchall():
        print(dict(r), file=out)
    print('\nLogs:', file=out)
    cur.execute('SELECT * FROM logs ORDER BY id DESC')
    for r in cur.fetchall():
        print(dict(r), file=out)
    conn.close()
    return 0


def main(argv=None):
    p = argparse.ArgumentParser(description='Dump sessions, runs and logs from the run store')
    p.add_argument('--db', default=DB_PATH, help='SQLite file (default: $RV32C_DB or runs.db)')
    p.add_argument('--session', type=int, help='Only this session and its runs')
    args = p.parse_args(argv)
    return dump(args.db, args.session)


if __name__ == '__main__':
    sys.exit(main())
