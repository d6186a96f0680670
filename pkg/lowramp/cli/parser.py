"""
CLI argument parsing
Subcommand parser, key=value config files and resolution into ExperimentConfig
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from lowramp import current_config
from lowramp.models import (
    AmpConfig, AmpVariant, ChannelFamily, ChannelSpec, Command, ExperimentConfig, InitMode,
    PriorFamily, PriorSpec, Symmetry,
)
from lowramp.validation import ConfigError, ValidationService

logger = logging.getLogger(__name__)

PRIOR_TAGS = [family.value for family in PriorFamily] + ['gauss_bernoulli']
CHANNEL_TAGS = [family.value for family in ChannelFamily]
BOOLEAN_KEYS = {'adaptive_damping', 'track_free_energy', 'bipartite'}

# CLI spellings of the Low-RAMP variants; the enum values are accepted as well
VARIANT_NAMES = {
    'full': AmpVariant.FULL,
    'self-averaged': AmpVariant.SELF_AVERAGED,
    'bayes': AmpVariant.BAYES_OPTIMAL,
}
VARIANT_NAMES.update({variant.value: variant for variant in AmpVariant})


def _add_common(parser):
    parser.add_argument('--config', help='key=value file; flags on the command line win')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--threads', type=int)
    parser.add_argument('--format', dest='output_format', choices=['csv', 'json'])
    parser.add_argument('-o', '--output', help='Output file or directory (stdout when omitted)')


def _add_prior(parser):
    parser.add_argument('--prior', choices=PRIOR_TAGS)
    parser.add_argument('--rho', type=float)
    parser.add_argument('--rank', type=int)
    parser.add_argument('--prior-mean', type=float)
    parser.add_argument('--prior-var', type=float)
    parser.add_argument('--prior-v', choices=PRIOR_TAGS, help='V prior, selects a bipartite instance')
    parser.add_argument('--rho-v', type=float)
    parser.add_argument('--prior-v-var', type=float)


def _add_channel(parser):
    parser.add_argument('--channel', choices=CHANNEL_TAGS)
    parser.add_argument('--delta', type=float)
    parser.add_argument('--beta', type=float)
    parser.add_argument('--p-out', type=float)
    parser.add_argument('--mu', type=float)
    parser.add_argument('--strength', type=float)
    parser.add_argument('--assumed-channel', choices=CHANNEL_TAGS)
    parser.add_argument('--assumed-delta', type=float)


def _add_size(parser):
    parser.add_argument('--n', type=int)
    parser.add_argument('--m', type=int)


def _add_amp(parser):
    parser.add_argument('--damping', type=float)
    parser.add_argument('--tol', type=float)
    parser.add_argument('--max-iters', type=int)
    parser.add_argument('--init', choices=[mode.value for mode in InitMode])
    parser.add_argument('--init-scale', type=float)
    parser.add_argument('--variant', choices=list(VARIANT_NAMES))
    parser.add_argument('--adaptive-damping', action='store_true', default=None)
    parser.add_argument('--track-free-energy', action='store_true', default=None)
    parser.add_argument('--symmetry', choices=[s.value for s in Symmetry])


def build_parser():
    """Parser with one subcommand per Command"""
    parser = argparse.ArgumentParser(
        prog='lowramp',
        description='Low-rank matrix estimation: instances, Low-RAMP, state evolution and phase diagrams.')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser(Command.GEN.value, help='Generate a planted or quenched instance')
    _add_common(gen)
    _add_prior(gen)
    _add_channel(gen)
    _add_size(gen)
    gen.add_argument('--instance-format', choices=['bin', 'csv'])

    amp = sub.add_parser(Command.AMP.value, help='Run Low-RAMP on an instance')
    _add_common(amp)
    _add_prior(amp)
    _add_channel(amp)
    _add_size(amp)
    _add_amp(amp)
    amp.add_argument('--instance', dest='instance_dir', help='Instance directory written by gen')

    se = sub.add_parser(Command.SE.value, help='Iterate the state evolution over a Delta grid')
    _add_common(se)
    _add_prior(se)
    _add_channel(se)
    se.add_argument('--delta-grid')
    se.add_argument('--alpha', type=float)

    scan = sub.add_parser(Command.PHASE_SCAN.value, help='Thresholds over a rho grid')
    _add_common(scan)
    scan.add_argument('--model', dest='model_tag')
    scan.add_argument('--rho-grid')
    scan.add_argument('--rank', type=int)
    scan.add_argument('--alpha', type=float)
    scan.add_argument('--rescale', choices=['rho2'])
    scan.add_argument('--x-max', type=float)
    scan.add_argument('--x-points', type=int)

    spectral = sub.add_parser(Command.SPECTRAL.value, help='Top-eigenvector estimates of S and Y')
    _add_common(spectral)
    _add_prior(spectral)
    _add_channel(spectral)
    _add_size(spectral)
    spectral.add_argument('--instance', dest='instance_dir')

    compare = sub.add_parser(Command.COMPARE.value, help='Low-RAMP versus state evolution over a Delta grid')
    _add_common(compare)
    _add_prior(compare)
    _add_size(compare)
    _add_amp(compare)
    compare.add_argument('--delta-grid')
    return parser


def read_config_file(path):
    """
    key=value pairs of a config file

    ``#`` starts a comment, blank lines are ignored and keys may use
    dashes or underscores.
    """
    values = {}
    try:
        lines = Path(path).read_text(encoding='utf-8').splitlines()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}")
    for number, raw in enumerate(lines, 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{path}:{number}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        values[key.replace('-', '_')] = value
    return values


def _config_tokens(values):
    tokens = []
    for key, value in values.items():
        flag = '--' + key.replace('_', '-')
        if key in BOOLEAN_KEYS:
            if value.lower() in ('1', 'true', 'yes', 'on'):
                tokens.append(flag)
            continue
        tokens.extend([flag, value])
    return tokens


def expand_config(argv):
    """Splice the --config file in front of the explicit flags so the flags win"""
    argv = list(argv)
    if not argv:
        return argv
    path = None
    rest = []
    i = 1
    while i < len(argv):
        token = argv[i]
        if token == '--config':
            if i + 1 >= len(argv):
                raise ConfigError("--config needs a file name")
            path = argv[i + 1]
            i += 2
            continue
        if token.startswith('--config='):
            path = token.split('=', 1)[1]
        else:
            rest.append(token)
        i += 1
    if path is None:
        return argv
    return [argv[0]] + _config_tokens(read_config_file(path)) + rest


def parse_grid(text, name):
    """
    Grid from 'a,b,c', 'log:start:stop:num' or 'lin:start:stop:num'

    Returns:
        tuple: Grid values in the order given
    """
    if text is None:
        raise ConfigError(f"Missing required field: {name}")
    text = str(text).strip()
    try:
        if text.startswith(('log:', 'lin:')):
            kind, start, stop, num = text.split(':')
            if kind == 'log':
                values = np.geomspace(float(start), float(stop), int(num))
            else:
                values = np.linspace(float(start), float(stop), int(num))
        else:
            values = np.array([float(v) for v in text.split(',') if v.strip()])
    except ValueError:
        raise ConfigError(f"Cannot parse grid {name}={text!r}")
    ValidationService.require(ValidationService.validate_grid(values, name))
    return tuple(float(v) for v in values)


def build_prior(tag, rho=None, rank=None, mean=None, var=None):
    """PriorSpec from CLI fields; missing parameters raise ConfigError naming the field"""
    if tag is None:
        raise ConfigError("Missing required field: prior")
    rank = 1 if rank is None else rank
    if tag in ('gauss_bernoulli', 'gauss_bernoulli_joint'):
        return PriorSpec.gauss_bernoulli(_required(rho, 'rho'), rank=rank, joint=True)
    if tag == 'gauss_bernoulli_indep':
        return PriorSpec.gauss_bernoulli(_required(rho, 'rho'), rank=rank, joint=False)
    if tag == 'gaussian':
        mean = 0.0 if mean is None else mean
        var = 1.0 if var is None else var
        return PriorSpec.gaussian([mean] * rank, (var * np.eye(rank)).tolist())
    if tag == 'spherical':
        return PriorSpec.spherical(rank)
    if tag == 'community':
        return PriorSpec.community(rank)
    family = PriorFamily(tag)
    if family is PriorFamily.ISING:
        return PriorSpec.ising(0.5 if rho is None else rho)
    return PriorSpec(family, rank, rho=_required(rho, 'rho'))


def build_channel(args):
    """ChannelSpec (with optional assumed likelihood) from parsed flags"""
    tag = getattr(args, 'channel', None)
    if tag is None:
        raise ConfigError("Missing required field: channel")
    assumed = None
    if getattr(args, 'assumed_channel', None):
        assumed = _channel(args.assumed_channel, delta=args.assumed_delta, beta=args.beta,
                           p_out=args.p_out, mu=args.mu, strength=args.strength)
    channel = _channel(tag, delta=args.delta, beta=args.beta, p_out=args.p_out, mu=args.mu,
                       strength=args.strength)
    return channel.with_assumed(assumed) if assumed is not None else channel


def _channel(tag, delta=None, beta=None, p_out=None, mu=None, strength=None):
    family = ChannelFamily(tag)
    if family is ChannelFamily.GAUSSIAN:
        return ChannelSpec.gaussian(_required(delta, 'delta'))
    if family is ChannelFamily.CONVENTIONAL:
        return ChannelSpec.conventional(_required(beta, 'beta'))
    if family is ChannelFamily.SBM:
        return ChannelSpec.sbm(_required(p_out, 'p_out'), _required(mu, 'mu'))
    if family is ChannelFamily.EXPONENTIAL:
        return ChannelSpec.exponential()
    if family is ChannelFamily.RANDOM_GAUSSIAN:
        return ChannelSpec.random_gaussian(1.0 if strength is None else strength)
    return ChannelSpec.random_pm1(1.0 if strength is None else strength)


def default_instance_dir(tag, seed):
    """Instance directory used by gen when no output is given: INSTANCE_DIR/<prior>_<seed>"""
    return Path(current_config().INSTANCE_DIR) / f"{tag}_{seed}"


def _required(value, name):
    if value is None:
        raise ConfigError(f"Missing required field: {name}")
    return value


def _amp_config(args, n):
    overrides = {}
    for key in ('damping', 'tol', 'max_iters', 'init_scale', 'adaptive_damping', 'track_free_energy'):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, 'init', None):
        overrides['init'] = InitMode(args.init)
    if getattr(args, 'variant', None):
        overrides['variant'] = VARIANT_NAMES[args.variant]
    if getattr(args, 'symmetry', None):
        overrides['mse_symmetry'] = Symmetry(args.symmetry)
    if getattr(args, 'seed', None) is not None:
        overrides['seed'] = args.seed
    if n is None:
        return AmpConfig.from_config(**overrides)
    return AmpConfig.default_for(n, **overrides)


def resolve_config(args):
    """
    ExperimentConfig from parsed arguments

    Args:
        args (argparse.Namespace): Output of ``build_parser().parse_args``

    Returns:
        ExperimentConfig: Validated configuration of the command
    """
    command = Command(args.command)
    cfg = ExperimentConfig(command=command)
    cfg.seed = args.seed if args.seed is not None else 0
    cfg.threads = args.threads if args.threads is not None else current_config().THREADS
    ValidationService.require(ValidationService.validate_size(cfg.threads, 'threads'))
    cfg.output = args.output
    cfg.output_format = args.output_format or 'csv'
    cfg.instance_dir = getattr(args, 'instance_dir', None)
    cfg.rank = getattr(args, 'rank', None)
    cfg.alpha = getattr(args, 'alpha', None)

    if command in (Command.GEN, Command.AMP, Command.SE, Command.SPECTRAL, Command.COMPARE):
        needs_prior = not (command in (Command.AMP, Command.SPECTRAL) and cfg.instance_dir)
        if needs_prior and args.prior is not None:
            cfg.prior = build_prior(args.prior, args.rho, args.rank, args.prior_mean, args.prior_var)
            if args.prior_v is not None:
                cfg.prior_v = build_prior(args.prior_v, args.rho_v, args.rank, None, args.prior_v_var)
        elif needs_prior and not (command is Command.GEN and getattr(args, 'channel', None)
                                  in (ChannelFamily.RANDOM_GAUSSIAN.value, ChannelFamily.RANDOM_PM1.value)):
            raise ConfigError("Missing required field: prior")
    if command in (Command.GEN, Command.AMP, Command.SPECTRAL):
        if not cfg.instance_dir:
            cfg.channel = build_channel(args)
            cfg.n = _required(args.n, 'n')
            cfg.m = args.m
            if cfg.prior_v is not None:
                cfg.m = _required(args.m, 'm')
    if command is Command.SE:
        cfg.channel = build_channel(args)
        if args.delta_grid is not None:
            cfg.delta_grid = parse_grid(args.delta_grid, 'delta_grid')
    if command is Command.GEN:
        cfg.extras['instance_format'] = args.instance_format or 'bin'
        if cfg.output is None:
            cfg.output = str(default_instance_dir(args.prior or args.channel, cfg.seed))
    if command in (Command.AMP, Command.COMPARE):
        cfg.amp = _amp_config(args, getattr(args, 'n', None))
        cfg.extras['symmetry_given'] = getattr(args, 'symmetry', None) is not None
    if command is Command.COMPARE:
        cfg.n = _required(args.n, 'n')
        cfg.delta_grid = parse_grid(args.delta_grid, 'delta_grid')
    if command is Command.PHASE_SCAN:
        cfg.model_tag = _required(args.model_tag, 'model')
        cfg.rho_grid = parse_grid(args.rho_grid, 'rho_grid') if args.rho_grid is not None else ()
        if not cfg.rho_grid and cfg.model_tag != 'community':
            raise ConfigError("Missing required field: rho_grid")
        cfg.rescale = args.rescale
        cfg.extras['x_max'] = args.x_max
        cfg.extras['x_points'] = args.x_points
    return cfg


def parse_args(argv):
    """argv (without the program name) to ExperimentConfig"""
    args = build_parser().parse_args(expand_config(argv))
    return resolve_config(args)
