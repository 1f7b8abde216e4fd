import os
import sys
import logging

logger = logging.getLogger(__name__)


def ensure_directories():
    """Create the default working directories if they don't exist."""
    dirs = ["logs", "runs"]

    for directory in dirs:
        if not os.path.exists(directory):
            os.makedirs(directory)
            logger.info(f"Created directory: {directory}")


def main():
    """Main entry point: python main.py <command> [options]."""
    from satcity.cli import main as cli_main

    ensure_directories()
    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
