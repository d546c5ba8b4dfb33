import sys

from stagger_lab.cli import main

sys.exit(main())
