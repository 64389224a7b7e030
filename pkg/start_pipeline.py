import logging
import sys
from argparse import ArgumentParser, Namespace
from typing import Callable, Dict, List, Optional

from definitions import TargetMode
from pipeline import commands
from pipeline.run_config import RunConfig
from utility.errors import LadmimError
from utility.log_handling import setup_logger

COMMANDS: Dict[str, Callable[[RunConfig], object]] = {
    'gen-data': commands.cmd_gen_data,
    'train-hvq': commands.cmd_train_hvq,
    'train-lavit': commands.cmd_train_lavit,
    'eval': commands.cmd_eval,
    'ablate': commands.cmd_ablate,
    'diagnose': commands.cmd_diagnose,
}

OVERRIDES: Dict[str, str] = {
    'out': 'out_dir',
    'target': 'target_mode',
    'n_masks': 'n_masks',
    'mask_ratio': 'mask_ratio',
    'epochs_hvq': 'hvq_epochs',
    'epochs_lavit': 'lavit_epochs',
}


def parse_args(argv: Optional[List[str]] = None) -> Namespace:
    parser = ArgumentParser(prog='Start LADMIM pipeline',
                            description='Logical and structural anomaly detection on a synthetic benchmark.')
    parser.add_argument('command', choices=list(COMMANDS.keys()), help='Pipeline stage to run.')
    parser.add_argument('--config', type=str, default=None, help='JSON run configuration file.')
    parser.add_argument('--seed', type=int, default=None, help='Sets the data, init, mask and eval seeds at once.')
    parser.add_argument('--out', type=str, default=None, help='Output directory of the run.')
    parser.add_argument('--target', type=str, default=None, choices=[mode.value for mode in TargetMode],
                        help='LAViT prediction target.')
    parser.add_argument('--n-masks', type=int, default=None, help='Masks per image at inference.')
    parser.add_argument('--mask-ratio', type=float, default=None, help='Fraction of masked tokens.')
    parser.add_argument('--epochs-hvq', type=int, default=None, help='Override the HVQ training epochs.')
    parser.add_argument('--epochs-lavit', type=int, default=None, help='Override the LAViT training epochs.')
    parser.add_argument('--quiet', action='store_true', help='Log INFO and above, hide the progress bars.')
    return parser.parse_args(argv)


def build_config(args: Namespace) -> RunConfig:
    config = RunConfig(file_path=args.config)
    if args.seed is not None:
        config.set_seed(args.seed)
    for argument, key in OVERRIDES.items():
        value = getattr(args, argument)
        if value is not None:
            config[key] = value
    config.validate()
    return config


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    try:
        config = build_config(args)
    except LadmimError as error:
        setup_logger('ladmim')
        logging.error(str(error))
        return error.exit_code

    setup_logger('ladmim', logging.INFO if args.quiet else logging.DEBUG, config['out_dir'])
    logging.info(f"running '{args.command}' with output directory \"{config['out_dir']}\"")
    config.store(commands.RunPaths(config['out_dir']).config)
    try:
        commands.configure_runtime(config)
        if args.command in ['train-hvq', 'train-lavit', 'ablate']:
            COMMANDS[args.command](config, progress=not args.quiet)
        else:
            COMMANDS[args.command](config)
    except LadmimError as error:
        logging.error(f'{args.command} failed: {error}')
        return error.exit_code
    finally:
        commands.write_run_statistics(config)
    logging.info(f"'{args.command}' finished")
    return 0


if __name__ == '__main__':
    sys.exit(main())
