"""Hot-kernel backend selection.

Imports the compiled extension when available, otherwise the numpy reference
implementations. ``PSDT_PURE_PYTHON=1`` forces the reference backend. Both
backends expose the same functions with identical semantics; ``BACKEND``
names the one in use.
"""

import os

if os.environ.get("PSDT_PURE_PYTHON"):
    from psdt.kernels.reference import *  # noqa: F401,F403
    from psdt.kernels.reference import BACKEND_NAME as BACKEND
else:
    try:
        from psdt.kernels._fast import *  # noqa: F401,F403
        from psdt.kernels._fast import BACKEND_NAME as BACKEND
    except ImportError:
        from psdt.kernels.reference import *  # noqa: F401,F403
        from psdt.kernels.reference import BACKEND_NAME as BACKEND
