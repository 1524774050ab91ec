"""
MIL-NCE command-line application factory
Modular structure: one command module per subcommand
"""
import click

from extensions import configure_logging

# Import commands
from commands.ablate import ablate_command
from commands.evaluate import eval_command
from commands.gen import gen_command
from commands.gradcheck import gradcheck_command
from commands.train import train_command


def create_cli():
    """CLI factory pattern"""
    @click.group()
    @click.option('--log-level', default='INFO', show_default=True,
                  type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
    def cli(log_level):
        """Contrastive video/narration embeddings from misaligned streams."""
        configure_logging(log_level)

    # Register commands
    cli.add_command(gen_command)
    cli.add_command(train_command)
    cli.add_command(eval_command)
    cli.add_command(gradcheck_command)
    cli.add_command(ablate_command)
    return cli


cli = create_cli()


def main():
    cli()


if __name__ == '__main__':
    main()
