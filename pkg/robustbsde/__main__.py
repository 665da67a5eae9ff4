"""Allow ``python -m robustbsde``."""

from robustbsde.cli import main

raise SystemExit(main())
