import sys

from fedsparse.cli import main

sys.exit(main())
