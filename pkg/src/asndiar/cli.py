"""Command line interface: ``asn <stage> --config cfg.json [--seed N] [--out DIR]``.

Config keys: ``meeting`` (keyword arguments of ``random_meeting``) or
``scene`` (a full scene description) for ``simulate``; ``input_wavs`` to
process pre-recorded per-device WAV files instead; ``pipeline`` for the
processing parameters; optionally ``reference_rttm`` for ``eval``.
"""
import argparse
import json
import logging
import sys

from .pipeline import STAGE_FUNCS, STAGES


def build_parser():
    parser = argparse.ArgumentParser(
        prog='asn', description='Spatial diarization and enhancement for '
                                'asynchronous acoustic sensor networks.')
    parser.add_argument('stage', choices=STAGES + ('all',))
    parser.add_argument('--config', required=True, help='JSON config file')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--out', default='out', help='output directory')
    parser.add_argument('-v', '--verbose', action='store_true')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        with open(args.config) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        print(f'asn: cannot read config: {e}', file=sys.stderr)
        return 2
    stages = STAGES if args.stage == 'all' else (args.stage,)
    if args.stage == 'all' and 'input_wavs' in cfg:
        stages = STAGES[1:]
    try:
        for stage in stages:
            result = STAGE_FUNCS[stage](cfg, args.out, args.seed)
            if stage == 'eval' and result is not None:
                print(json.dumps({k: v for k, v in result.items()
                                  if k != 'mapping'}, indent=2))
    except (FileNotFoundError, ValueError) as e:
        print(f'asn {stage}: {e}', file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
