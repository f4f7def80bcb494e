"""Hot-kernel backend selection.

The compiled extension is used when available; setting VOTUNER_PURE_PYTHON=1
forces the NumPy fallback.  Both expose the same functions with matching
semantics; `benchmarks/bench_kernels.py` compares their throughput.
"""

import os

if os.environ.get("VOTUNER_PURE_PYTHON"):
    from . import fallback as impl
else:
    try:
        from . import _native as impl  # type: ignore[attr-defined]
    except ImportError:
        from . import fallback as impl

fast_detect = impl.fast_detect
klt_track = impl.klt_track
motion_blur = impl.motion_blur
value_noise = impl.value_noise
render_planes = impl.render_planes


def backend_name() -> str:
    return impl.BACKEND
