import sys

from mtsm.cli import main

sys.exit(main())
