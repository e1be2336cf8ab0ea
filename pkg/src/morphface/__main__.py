import sys

from morphface.cli import main

sys.exit(main())
