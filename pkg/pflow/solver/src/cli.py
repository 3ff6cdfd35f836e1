import functools
import importlib
import json
import os
import sys
import time
from typing import Any, Callable, Dict, Optional

import click
import numpy as np
from click.core import ParameterSource

from core.harness import StudyConfig, run_study, level_plan
from core.inequalities import shift_change_check, young_check
from core.interpolation import OPERATORS, f_interpolation_check, interpolation_study
from core.mesh import mesh_stats, refine, unit_square_mesh
from core.mms import CATALOG
from core.rates import ConvergenceTable
from core.structure import (
    StructureParams, check_structure, equivalence_probe, random_tensor_pairs, stress
)
from utils.config import solver_config
from utils.config_manager import load_flat_config
from utils.error_handler import (
    EXIT_CONFIG, EXIT_OK, EXIT_SLOPE, EXIT_SOLVER, ConfigError, ErrorHandler, PflowError
)
from utils.logger import get_logger
from utils.process_pool import LevelPool

logger = get_logger(__name__)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def _dumps(payload: Dict[str, Any]) -> str:
    return json.dumps(_jsonable(payload), sort_keys=True, indent=2)


def _sidecar_path(out: str) -> str:
    return os.path.splitext(out)[0] + '.json'


def _apply_config_file(ctx: click.Context, options: Dict[str, Any]) -> Dict[str, Any]:
    """Fill options not given on the command line from the flat --config file"""
    path = options.pop('config', None)
    if not path:
        return options
    params = {p.name: p for p in ctx.command.params if p.name != 'config'}
    for key, raw in load_flat_config(path, params).items():
        if ctx.get_parameter_source(key) == ParameterSource.COMMANDLINE:
            continue
        try:
            options[key] = params[key].type(raw, params[key], ctx)
        except click.BadParameter as e:
            raise ConfigError(f"{path}: invalid value for '{key}': {e.message}")
    return options


def guarded(command: Callable[..., int]):
    """Apply the config file, run the command and turn errors into exit codes"""
    @functools.wraps(command)
    @click.pass_context
    def wrapper(ctx: click.Context, **options):
        handler = ErrorHandler()
        try:
            code = command(**_apply_config_file(ctx, options))
        except PflowError as e:
            info = handler.handle_error(e)
            click.echo(f"Error: {e}", err=True)
            hint = handler.format_user_message(info)
            if not hint.startswith('An error occurred'):
                click.echo(hint, err=True)
            ctx.exit(handler.exit_code(e))
        ctx.exit(code)
    return wrapper


def config_option(command):
    return click.option('--config', type=click.Path(dir_okay=False),
                        help='Flat key=value file; command line options win')(command)


def structure_options(command):
    command = click.option('--epsilon', type=float, default=0.0, show_default=True,
                           help='Linear regularization eps')(command)
    command = click.option('--delta', type=float, default=0.0, show_default=True)(command)
    command = click.option('--p', 'p', type=float, default=2.0, show_default=True)(command)
    return command


def output_options(command):
    command = click.option('--format', 'fmt', type=click.Choice(['csv', 'json']), default='csv',
                           show_default=True)(command)
    command = click.option('--out', type=click.Path(dir_okay=False),
                           help='Output path; a JSON sidecar is written next to CSV output')(command)
    return command


def emit(table: ConvergenceTable, out: Optional[str], fmt: str,
         sidecar: Dict[str, Any]):
    """Write the table (CSV or JSON) and, for CSV files, the sidecar"""
    if fmt == 'json':
        text = _dumps({**sidecar, 'table': table.to_dict()})
        if out:
            with open(out, 'w') as f:
                f.write(text + '\n')
        else:
            click.echo(text)
        return

    if out:
        table.to_csv(out)
        with open(_sidecar_path(out), 'w') as f:
            f.write(_dumps(sidecar) + '\n')
        click.echo(f"Wrote {out} ({len(table)} rows) and {_sidecar_path(out)}")
    else:
        click.echo(table.to_csv(), nl=False)
        click.echo(_dumps(sidecar), err=True)


class PflowGroup(click.Group):
    """Command group whose usage errors exit with the config code"""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.UsageError as e:
            if not standalone_mode:
                raise
            e.show()
            sys.exit(EXIT_CONFIG)
        except click.ClickException as e:
            if not standalone_mode:
                raise
            e.show()
            sys.exit(e.exit_code)
        except click.Abort:
            if not standalone_mode:
                raise
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_SOLVER)
        if not standalone_mode:
            return rv
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


@click.group(cls=PflowGroup)
def cli():
    """pflow: implicit FEM for parabolic (p, delta)-structure systems"""
    pass


@cli.command()
@config_option
@structure_options
@click.option('--kind', type=click.Choice(['spatial', 'temporal', 'coupled']),
              default=solver_config.get('study.kind', 'coupled'), show_default=True)
@click.option('--mms', type=click.Choice(sorted(CATALOG)), default=None,
              help='Manufactured solution (default depends on --kind)')
@click.option('--levels', type=int, default=solver_config.get('study.levels', 4), show_default=True)
@click.option('--base-n', type=int, default=solver_config.get('study.base_n', 4), show_default=True)
@click.option('--base-m', 'base_m', type=int, default=solver_config.get('study.base_M', 4),
              show_default=True)
@click.option('--final-time', type=float, default=solver_config.get('study.final_time', 1.0),
              show_default=True)
@click.option('--sigma0', type=float, default=None)
@click.option('--tol', type=float, default=solver_config.get('stepper.tol', 1e-10), show_default=True)
@click.option('--seed', type=int, default=solver_config.get('study.seed', 0), show_default=True)
@click.option('--slope-min', type=float, default=solver_config.get('study.slope_min', 0.85),
              show_default=True)
@click.option('--workers', type=int, default=None, help='Worker processes (default: PFLOW_THREADS)')
@output_options
@guarded
def study(p, delta, epsilon, kind, mms, levels, base_n, base_m, final_time, sigma0, tol,
          seed, slope_min, workers, out, fmt):
    """Run a convergence study against a manufactured solution"""
    params = StructureParams(p=p, delta=delta, epsilon=epsilon)
    cfg = StudyConfig(params=params, kind=kind, mms=mms, levels=levels, base_n=base_n,
                      base_M=base_m, final_time=final_time, sigma0=sigma0, tol=tol,
                      seed=seed, slope_min=slope_min)
    plans, resolved_sigma0 = level_plan(cfg)
    click.echo(f"{kind} study: " + ", ".join(f"n={pl.n}/M={pl.M}" for pl in plans), err=True)

    started = time.perf_counter()
    table = run_study(cfg, pool=LevelPool(workers, progress=True))
    runtime = time.perf_counter() - started

    passed = bool(table.meta['passed'])
    sidecar = {
        'config': {**cfg.to_dict(), 'sigma0': resolved_sigma0},
        'slopes': {k: v.to_dict() for k, v in table.slopes.items()},
        'seed': seed,
        'runtime_seconds': runtime,
        'pass': passed,
        'monotone_decay': table.meta['monotone_decay'],
        'accepted_non_monotone': table.meta['accepted_non_monotone'],
        'energy_bounds': table.meta['energy_bounds']
    }
    emit(table, out, fmt, sidecar)
    total = table.slopes['total']
    click.echo(f"total error slope vs {table.meta['axis']}: "
               f"{'exact' if total.exact else total.slope} (min {slope_min})", err=True)
    return EXIT_OK if passed else EXIT_SLOPE


def load_stress_plugin(target: str) -> Callable[[np.ndarray], np.ndarray]:
    """Resolve 'module:function' to a stress callback P -> S(P)"""
    module_name, sep, attr = target.partition(':')
    if not sep or not module_name or not attr:
        raise ConfigError(f"stress plugin must look like module:function, got '{target}'")
    try:
        module = importlib.import_module(module_name)
        fn = getattr(module, attr)
    except (ImportError, AttributeError) as e:
        raise ConfigError(f"Cannot load stress plugin '{target}': {e}")
    if not callable(fn):
        raise ConfigError(f"stress plugin '{target}' is not callable")
    return fn


@cli.command()
@config_option
@structure_options
@click.option('--samples', type=int, default=solver_config.get('structure.samples', 10000),
              show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--stress-plugin', default=None, help='module:function stress callback to check')
@click.option('--inequalities/--no-inequalities', default=False,
              help='Also run the Young and shift-change split-sample checks')
@click.option('--eps', 'eps_values', type=float, multiple=True,
              default=tuple(solver_config.get('inequalities.eps', [0.1, 1.0])), show_default=True,
              help='Young / shift-change epsilon; repeat for several values')
@click.option('--out', type=click.Path(dir_okay=False), help='Write the JSON report here')
@guarded
def check(p, delta, epsilon, samples, seed, stress_plugin, inequalities, eps_values, out):
    """Check the (p, delta)-structure of a stress and the equivalence brackets"""
    if samples < 1:
        raise ConfigError("samples must be positive")
    params = StructureParams(p=p, delta=delta, epsilon=epsilon)
    if stress_plugin:
        stress_fn = load_stress_plugin(stress_plugin)
    else:
        stress_fn = functools.partial(stress, params)

    pairs = random_tensor_pairs(samples, seed=seed)
    report = check_structure(stress_fn, params, pairs, seed=seed)
    payload = {
        'params': params.to_dict(),
        'stress': stress_plugin or 'canonical',
        'structure': report.to_dict(),
        'equivalence': equivalence_probe(params, pairs, seed=seed).to_dict()
    }
    passed = report.passed
    if inequalities:
        young = [young_check(params, e, seed=seed, n_test=samples) for e in eps_values]
        shift = [shift_change_check(params, e, seed=seed, n_test=samples) for e in eps_values]
        payload['young'] = {str(e): r.to_dict() for e, r in zip(eps_values, young)}
        payload['shift_change'] = {str(e): r.to_dict() for e, r in zip(eps_values, shift)}
        passed = passed and all(r.passed for r in young + shift)

    payload['pass'] = passed

    text = _dumps(payload)
    if out:
        with open(out, 'w') as f:
            f.write(text + '\n')
    click.echo(text)
    return EXIT_OK if passed else EXIT_SLOPE


@cli.command()
@config_option
@click.option('--which', type=click.Choice(['rates', 'fmap']), default='rates', show_default=True,
              help='Operator approximation rates, or the F-map interpolation check')
@click.option('--ell', type=int, default=2, show_default=True)
@click.option('--q', 'q', type=float, default=2.0, show_default=True)
@click.option('--r', 'r', type=float, default=2.0, show_default=True)
@click.option('--j-max', type=int, default=None, help='Highest derivative order measured')
@click.option('--levels', type=int, default=4, show_default=True)
@click.option('--base-n', type=int, default=None)
@click.option('--operator', type=click.Choice(sorted(OPERATORS)), default='clement',
              show_default=True)
@structure_options
@click.option('--slope-min', type=float, default=solver_config.get('study.slope_min', 0.85),
              show_default=True)
@output_options
@guarded
def interp(which, ell, q, r, j_max, levels, base_n, operator, p, delta, epsilon, slope_min,
           out, fmt):
    """Measure interpolation rates over a refinement family"""
    if levels < 3:
        raise ConfigError("levels must be at least 3")
    started = time.perf_counter()
    if which == 'fmap':
        params = StructureParams(p=p, delta=delta, epsilon=epsilon)
        table = f_interpolation_check(params, levels=levels, base_n=base_n or 4,
                                      operator=operator, slope_min=slope_min)
        config = {'which': which, 'params': params.to_dict(), 'levels': levels,
                  'base_n': base_n or 4, 'operator': operator, 'slope_min': slope_min}
    else:
        table = interpolation_study(q, r, ell, levels=levels, j_max=j_max, base_n=base_n,
                                    operator=operator)
        config = {'which': which, 'ell': ell, 'q': q, 'r': r, 'j_max': table.meta['j_max'],
                  'levels': levels, 'base_n': base_n, 'operator': operator,
                  'predicted': table.meta['predicted']}

    passed = bool(table.meta['passed'])
    sidecar = {
        'config': config,
        'slopes': {k: v.to_dict() for k, v in table.slopes.items()},
        'seed': None,
        'runtime_seconds': time.perf_counter() - started,
        'pass': passed
    }
    emit(table, out, fmt, sidecar)
    return EXIT_OK if passed else EXIT_SLOPE


@cli.command()
@config_option
@click.option('--n', 'n', type=int, default=4, show_default=True)
@click.option('--levels', type=int, default=1, show_default=True)
@guarded
def mesh(n, levels):
    """Print statistics of the unit-square mesh family"""
    if n < 1 or levels < 1:
        raise ConfigError("n and levels must be positive")
    family = refine(unit_square_mesh(n), levels)
    click.echo(_dumps({'levels': [dict(level=i, **mesh_stats(m)) for i, m in enumerate(family)]}))
    return EXIT_OK


if __name__ == '__main__':
    cli()
