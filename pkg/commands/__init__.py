"""
CLI commands
One click command per subcommand; errors map to stable exit codes here
"""
from functools import wraps

import click

from extensions import logger
from utils.constants import EXIT_ARTIFACT, EXIT_CONFIG, EXIT_GRADCHECK, EXIT_NUMERIC
from utils.errors import ArtifactMismatchError, ConfigError, GradCheckError, NonFiniteError


class ConfigFailure(click.ClickException):
    exit_code = EXIT_CONFIG


class NumericFailure(click.ClickException):
    exit_code = EXIT_NUMERIC


class GradCheckFailure(click.ClickException):
    exit_code = EXIT_GRADCHECK


class ArtifactFailure(click.ClickException):
    exit_code = EXIT_ARTIFACT


def handle_errors(f):
    """Turn package errors into click exceptions carrying the exit code"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except ConfigError as e:
            raise ConfigFailure(str(e)) from e
        except NonFiniteError as e:
            logger.error(f"Numeric abort: {e}")
            raise NumericFailure(str(e)) from e
        except GradCheckError as e:
            raise GradCheckFailure(str(e)) from e
        except ArtifactMismatchError as e:
            raise ArtifactFailure(str(e)) from e
        except FileNotFoundError as e:
            raise click.ClickException(f"File not found: {e.filename}") from e
    return decorated_function
