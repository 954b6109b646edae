import sys

from moder.cli import main

sys.exit(main())
