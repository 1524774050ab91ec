"""
gradcheck: finite-difference verification of every loss
"""
import click

from commands import handle_errors
from engine.gradcheck import check_loss
from utils.constants import GRADCHECK_TOLERANCE, LOSS_KINDS
from utils.errors import GradCheckError
from utils.serialization import write_json


@click.command('gradcheck')
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--loss', 'losses', type=click.Choice(LOSS_KINDS), multiple=True,
              help='Loss kinds to check (default: all).')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None,
              help='Report JSON to write.')
@click.option('--corrupt', is_flag=True, hidden=True,
              help='Perturb one analytic gradient before comparing.')
@handle_errors
def gradcheck_command(seed, losses, out_path, corrupt):
    """Compare analytic and numerical gradients for each loss."""
    reports = [check_loss(kind, seed, corrupt=corrupt) for kind in (losses or LOSS_KINDS)]
    for r in reports:
        mark = 'ok' if r.passed else 'FAIL'
        click.echo(f"{r.loss_kind:<11} max_rel_error={r.max_rel_error:.3e} "
                   f"checked={r.checked} skipped={r.skipped} {mark}")
    if out_path:
        write_json(out_path, {'seed': seed, 'tolerance': GRADCHECK_TOLERANCE,
                              'reports': [r.to_dict() for r in reports]})

    failed = [r.loss_kind for r in reports if not r.passed]
    if failed:
        raise GradCheckError(f"gradient check failed for: {', '.join(failed)}")
