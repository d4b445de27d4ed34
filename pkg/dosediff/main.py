import sys

from dosediff.api import run
from dosediff.core.logging import setup_logging


def main() -> int:
    setup_logging()
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
