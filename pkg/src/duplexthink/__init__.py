"""Full-duplex dialogue agent that keeps reasoning in latent embedding space
while it listens, trained against a global posterior expert."""

import os

__version__ = "0.1.0"

# The workload is many small GEMMs; BLAS thread fan-out costs more than it
# buys at these shapes. Override with DUPLEXTHINK_BLAS_THREADS if needed.
try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _threadpool_limits(limits=int(os.environ.get("DUPLEXTHINK_BLAS_THREADS", "1")), user_api="blas")
except Exception:  # pragma: no cover - optional tuning only
    pass
