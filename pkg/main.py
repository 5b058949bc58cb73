import os
import sys

sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))

from src.api.cli import main  # pylint: disable=wrong-import-position

if __name__ == "__main__":
    sys.exit(main())
