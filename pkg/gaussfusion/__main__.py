import sys

from gaussfusion.cli import main

sys.exit(main())
