import sys

from cokriging.cli import main

if __name__ == "__main__":
    sys.exit(main())
