"""
CLI commands
One function per subcommand; each returns the process exit code
"""
from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import replace
import io
import json
import logging
import math
from pathlib import Path
import sys

import numpy as np

from config import Config
from lowramp.models import (
    ChannelSpec, Command, InitMode, InstanceKind, PriorFamily, SEModel, Symmetry,
)
from lowramp.services.amp_service import AmpService
from lowramp.services.channels import ChannelService
from lowramp.services.instance_service import InstanceService
from lowramp.services.pca_service import PCAService
from lowramp.services.persistence import PersistenceService
from lowramp.services.priors import PriorService
from lowramp.services.state_evolution import StateEvolutionService
from lowramp.services.thresholds import ThresholdService
from lowramp.validation import ConfigError, NoInformativeFixedPoint, NumericalError, log_call

logger = logging.getLogger(__name__)

THRESHOLD_COLUMNS = ['rho', 'delta_c', 'delta_alg', 'delta_it', 'delta_dyn']
COMPARE_COLUMNS = ['delta', 'mse_amp_uninformative', 'mse_amp_informative',
                   'mse_se_uninformative', 'mse_se_informative', 'mse_pca']
SE_COLUMNS = ['delta', 'mse_uninformative', 'mse_informative',
              'free_energy_uninformative', 'free_energy_informative',
              'iterations_uninformative', 'iterations_informative']
TRACE_COLUMNS = ['t', 'conv', 'mse', 'free_energy']
SPECTRAL_COLUMNS = ['matrix', 'overlap', 'mse', 'predicted_overlap']


def format_value(value):
    """12 significant digits for floats, empty for missing values"""
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return ''
        return format(float(value), Config.FLOAT_FORMAT)
    return str(value)


def render_rows(rows, columns, fmt='csv'):
    """Rows as CSV or JSON text, columns in the given order"""
    if fmt == 'json':
        clean = [{key: _json_value(row.get(key)) for key in columns} for row in rows]
        return json.dumps(clean, indent=2) + '\n'
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(key)) for key in columns])
    return buffer.getvalue()


def _json_value(value):
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return None
        return float(format(float(value), Config.FLOAT_FORMAT))
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_rows(rows, columns, output=None, fmt='csv'):
    text = render_rows(rows, columns, fmt)
    if output is None:
        sys.stdout.write(text)
        return
    path = Path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding='utf-8')
    logger.info(f"Wrote {len(rows)} rows to {path}")


def _ordered_map(fn, items, threads):
    """Grid points on a worker pool; results keep the grid order"""
    if threads <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _generate(cfg, channel=None):
    channel = channel or cfg.channel
    if channel.is_quenched:
        return InstanceService.generate_quenched(channel, cfg.n, cfg.m, cfg.seed, cfg.threads)
    if cfg.prior is None:
        raise ConfigError("Missing required field: prior")
    if cfg.prior_v is not None:
        return InstanceService.generate_bipartite(cfg.prior, cfg.prior_v, channel, cfg.n, cfg.m,
                                                  cfg.seed, cfg.threads)
    return InstanceService.generate_symmetric(cfg.prior, channel, cfg.n, cfg.seed, cfg.threads)


def _instance(cfg):
    if cfg.instance_dir:
        return PersistenceService.load_instance(cfg.instance_dir)
    return _generate(cfg)


def _algorithm_priors(cfg, instance):
    """Priors given on the command line, else the planted ones recorded with the instance"""
    if cfg.prior is not None:
        return (cfg.prior,) if cfg.prior_v is None else (cfg.prior, cfg.prior_v)
    if instance.priors:
        return instance.priors
    raise ConfigError("Missing required field: prior")


@log_call('cmd_gen')
def cmd_gen(cfg):
    """Generate an instance and write it to ``cfg.output``"""
    instance = _generate(cfg)
    meta = PersistenceService.save_instance(instance, cfg.output, cfg.extras.get('instance_format', 'bin'))
    print(f"Instance written to {cfg.output} (Y sha256 {meta['y_sha256']})")
    return 0


@log_call('cmd_amp')
def cmd_amp(cfg):
    """Run Low-RAMP; the trace goes to stdout or ``output/trace.csv`` next to the estimates"""
    instance = _instance(cfg)
    priors = _algorithm_priors(cfg, instance)
    if instance.kind is InstanceKind.BIPARTITE:
        if len(priors) != 2:
            raise ConfigError("Missing required field: prior_v")
        result = AmpService.run_bipartite(instance, priors[0], priors[1], cfg.amp)
        arrays = {'u_hat': result.state_u.x_hat, 'v_hat': result.state_v.x_hat}
    else:
        result = AmpService.run_symmetric(instance, priors[0], cfg.amp)
        arrays = {'x_hat': result.state.x_hat,
                  'sigma': result.state.sigma.reshape(instance.n, -1)}
    rows = [{'t': rec.t, 'conv': rec.conv, 'mse': rec.mse, 'free_energy': rec.free_energy}
            for rec in result.trace]
    if cfg.output is None:
        write_rows(rows, TRACE_COLUMNS, None, cfg.output_format)
    else:
        PersistenceService.save_estimates(cfg.output, arrays)
        write_rows(rows, TRACE_COLUMNS, Path(cfg.output) / f"trace.{cfg.output_format}", cfg.output_format)
    if not result.converged:
        logger.warning(f"Low-RAMP stopped after {len(result.trace)} iterations without converging")
    return 0


def _se_row(model, delta):
    uninformative = StateEvolutionService.iterate(model, informative=False)
    informative = StateEvolutionService.iterate(model, informative=True)
    return {
        'delta': delta,
        'mse_uninformative': uninformative.mse,
        'mse_informative': informative.mse,
        'free_energy_uninformative': StateEvolutionService.replica_free_energy(model, uninformative.params),
        'free_energy_informative': StateEvolutionService.replica_free_energy(model, informative.params),
        'iterations_uninformative': uninformative.iterations,
        'iterations_informative': informative.iterations,
    }


@log_call('cmd_se')
def cmd_se(cfg):
    """State evolution from both starts; a Delta grid replaces the Gaussian channel's Delta"""
    channels = [cfg.channel]
    if cfg.delta_grid:
        if cfg.channel.generating.family.value != 'gaussian':
            raise ConfigError("--delta-grid needs a gaussian channel")
        channels = [replace(cfg.channel, delta=delta) for delta in cfg.delta_grid]

    def point(channel):
        noise = ChannelService.noise_params(channel)
        model = SEModel.for_noise(cfg.prior, noise, prior_v=cfg.prior_v,
                                  alpha=cfg.alpha if cfg.prior_v is not None else None)
        delta = channel.delta if channel.delta is not None else noise.delta
        logger.info(f"State evolution at delta={delta}")
        return _se_row(model, delta)

    rows = _ordered_map(point, channels, cfg.threads)
    write_rows(rows, SE_COLUMNS, cfg.output, cfg.output_format)
    return 0


@log_call('cmd_phase_scan')
def cmd_phase_scan(cfg):
    """Thresholds per rho, optionally divided by rho^2"""
    x_grid = None
    if cfg.extras.get('x_max') or cfg.extras.get('x_points'):
        x_grid = ThresholdService.default_grid(cfg.extras.get('x_points'), x_max=cfg.extras.get('x_max'))
    points = list(cfg.rho_grid) if cfg.rho_grid else [None]

    def point(rho):
        if cfg.alpha is not None:
            result = ThresholdService.bipartite_thresholds(cfg.model_tag, rho, cfg.alpha, x_grid)
        else:
            result = ThresholdService.thresholds(cfg.model_tag, rho, x_grid, cfg.rank)
        row = {'rho': rho, **result.as_row()}
        if cfg.rescale == 'rho2' and rho is not None:
            for key in THRESHOLD_COLUMNS[1:]:
                if row[key] is not None:
                    row[key] = row[key] / rho ** 2
        logger.info(f"Phase scan {cfg.model_tag} rho={rho}: {row}")
        return row

    rows = _ordered_map(point, points, cfg.threads)
    write_rows(rows, THRESHOLD_COLUMNS, cfg.output, cfg.output_format)
    return 0


def _predicted_overlap(prior0, noise):
    try:
        result = PCAService.pca_analysis(prior0, noise)
    except NoInformativeFixedPoint:
        return 0.0
    _, second = PriorService.moments(prior0)
    eigvals = np.linalg.eigvalsh(second)
    return float(np.mean(result.m ** 2 / (result.q * eigvals)))


def natural_symmetry(prior):
    """Symmetry under which the posterior cannot tell the planted signal apart"""
    if prior.family is PriorFamily.COMMUNITY or prior.rank > 1:
        return Symmetry.PERMUTATION
    return Symmetry.SIGN if PriorService.is_zero_mean(prior) else Symmetry.NONE


@log_call('cmd_spectral')
def cmd_spectral(cfg):
    """Spectral estimates from S and from the raw Y, with overlaps and the predicted overlap"""
    instance = _instance(cfg)
    if not instance.is_planted:
        raise ConfigError("The spectral command needs a planted instance")
    prior0 = instance.priors[0] if instance.priors else cfg.prior
    planted = instance.x0 if instance.kind is InstanceKind.SYMMETRIC else instance.u0
    rank = planted.shape[1]
    scale = np.diag(PriorService.moments(prior0)[1])
    symmetry = Symmetry.SIGN if rank == 1 else Symmetry.PERMUTATION
    generating = instance.channel.generating
    rows = []
    for name, matrix, assumed in (('S', instance.s_matrix, instance.channel.likelihood),
                                  ('Y', instance.y_dense(), ChannelSpec.gaussian(1.0))):
        estimate = PCAService.spectral_estimate(matrix, rank, scale, seed=cfg.seed)
        predicted = None
        if instance.kind is InstanceKind.SYMMETRIC:
            try:
                predicted = _predicted_overlap(prior0, ChannelService.noise_params(generating, assumed))
            except (ConfigError, NumericalError) as e:
                logger.warning(f"No PCA prediction for {name}: {e}")
        rows.append({
            'matrix': name,
            'overlap': PCAService.spectral_overlap(estimate, planted),
            'mse': InstanceService.empirical_mse(estimate, planted, symmetry),
            'predicted_overlap': predicted,
        })
    write_rows(rows, SPECTRAL_COLUMNS, cfg.output, cfg.output_format)
    return 0


@log_call('cmd_compare')
def cmd_compare(cfg):
    """Empirical Low-RAMP MSE against state evolution and PCA over a Delta grid"""
    prior = cfg.prior
    symmetry = cfg.amp.mse_symmetry if cfg.extras.get('symmetry_given') else natural_symmetry(prior)

    def point(delta):
        instance = InstanceService.generate_symmetric(prior, ChannelSpec.gaussian(delta), cfg.n, cfg.seed,
                                                      threads=1)
        row = {'delta': delta}
        for label, init in (('uninformative', InitMode.RANDOM), ('informative', InitMode.PLANTED)):
            result = AmpService.run_symmetric(instance, prior, replace(cfg.amp, init=init, mse_symmetry=symmetry))
            row[f'mse_amp_{label}'] = InstanceService.empirical_mse(result.state.x_hat, instance.x0, symmetry)
        model = SEModel.bayes(prior, delta)
        row['mse_se_uninformative'] = StateEvolutionService.bayes_fixed_point(model, informative=False).mse
        row['mse_se_informative'] = StateEvolutionService.bayes_fixed_point(model, informative=True).mse
        try:
            row['mse_pca'] = PCAService.pca_analysis(prior, model.noise).mse
        except NoInformativeFixedPoint as e:
            row['mse_pca'] = e.mse
        logger.info(f"Compare delta={delta}: {row}")
        return row

    rows = _ordered_map(point, list(cfg.delta_grid), cfg.threads)
    write_rows(rows, COMPARE_COLUMNS, cfg.output, cfg.output_format)
    return 0


COMMANDS = {
    Command.GEN: cmd_gen,
    Command.AMP: cmd_amp,
    Command.SE: cmd_se,
    Command.PHASE_SCAN: cmd_phase_scan,
    Command.SPECTRAL: cmd_spectral,
    Command.COMPARE: cmd_compare,
}
