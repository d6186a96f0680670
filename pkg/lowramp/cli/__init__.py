"""
Low-RAMP command line
Entry point for gen, amp, se, phase-scan, spectral and compare
"""
import logging
import os
import sys

from lowramp import create_context
from lowramp.validation import ConfigError, NumericalError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def main(argv=None):
    """
    Run one subcommand

    Returns:
        int: 0 on success, 2 for malformed input, 3 for numerical failures
    """
    from lowramp.cli.commands import COMMANDS
    from lowramp.cli.parser import parse_args

    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        create_context(os.getenv('LOWRAMP_ENV', 'default'))
        cfg = parse_args(argv)
        return COMMANDS[cfg.command](cfg)
    except SystemExit as e:
        # argparse reports usage errors this way
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        logger.error(f"Numerical error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        logger.error(f"I/O error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
