#!/usr/bin/env python3
"""Check an RV32IM image and print a compact summary.

Usage examples:
  python tools/check_elf.py benchmarks/bin/is-prime.elf
  python tools/check_elf.py --run --json benchmarks/bin/selftest.elf

The script validates the ELF header and PT_LOAD segments without executing
anything. With --run it also executes the image once on the concrete
interpreter and reports exit status, step count and output.
"""
import argparse
import json
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from engine import ConcreteInterpreter  # noqa: E402
from explorer import prepare  # noqa: E402
from machine import validate_image  # noqa: E402


def summarize(path, run=False, step_limit=10 ** 6):
    summary = validate_image(path)
    if not summary['ok'] or not run:
        return summary
    with open(path, 'rb') as f:
        result = ConcreteInterpreter(prepare(f.read()), step_limit=step_limit).run()
    summary['run'] = {
        'status': str(result.status),
        'steps': result.steps,
        'output': result.output.decode('latin-1'),
        'hypercalls': [h.number for h in result.hypercalls],
    }
    return summary


def compact_print(path, summary):
    if not summary['ok']:
        print(f'{path}: invalid ({summary["reason"]})')
        return
    print(f'{path}:')
    print(f'  entry: 0x{summary["entry"]:08x}')
    for seg in summary['segments']:
        bss = seg['mem_size'] - seg['file_size']
        print(f'  segment 0x{seg["vaddr"]:08x} file={seg["file_size"]} mem={seg["mem_size"]}'
              + (f' bss={bss}' if bss else ''))
    run = summary.get('run')
    if run:
        print(f'  run: {run["status"]} steps={run["steps"]} output={run["output"]!r}')


def main(argv=None):
    p = argparse.ArgumentParser(description='Check an RV32IM ELF image and print a compact summary')
    p.add_argument('images', nargs='+', help='ELF files to check')
    p.add_argument('--run', action='store_true', help='Also run each image once on the concrete interpreter')
    p.add_argument('--step-limit', type=int, default=10 ** 6, help='Instruction limit for --run')
    p.add_argument('--json', dest='as_json', action='store_true', help='Emit structured JSON output')
    args = p.parse_args(argv)

    failed = 0
    for path in args.images:
        summary = summarize(path, run=args.run, step_limit=args.step_limit)
        failed += not summary['ok']
        if args.as_json:
            print(json.dumps({'image': path, **summary}))
        else:
            compact_print(path, summary)
    return 1 if failed else 0


if __name__ == '__main__':
    sys.exit(main())
