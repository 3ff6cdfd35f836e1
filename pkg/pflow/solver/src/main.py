import sys

from cli import cli
from utils.logger import get_logger


def main():
    logger = get_logger(__name__)

    try:
        cli.main(prog_name='pflow')
    except KeyboardInterrupt:
        logger.info("Interrupted, shutting down...")
        sys.exit(130)
    except Exception as e:
        logger.error(f"Error in main: {str(e)}")
        raise


if __name__ == "__main__":
    main()
