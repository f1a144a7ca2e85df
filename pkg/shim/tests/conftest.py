import os
import sys

# Run the kernel out of the current interpreter so the tests do not depend on
# an `attnctl` console script being first on PATH.
os.environ.setdefault("ATTNCTL_KERNEL", f"{sys.executable} -m attnctl")
