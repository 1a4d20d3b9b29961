import sys

from mwcnn.cli import main

sys.exit(main())
