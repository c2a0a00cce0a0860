"""Hot-loop kernels, compiled when available.

The Cython extension ``dlsm._ckernels`` is used if it was built; otherwise
the pure-Python twin in ``dlsm._kernels_py``. Set ``DLSM_PURE_PYTHON=1`` to
force the fallback.
"""

import os

if os.environ.get("DLSM_PURE_PYTHON"):
    from dlsm import _kernels_py as _impl
else:
    try:
        from dlsm import _ckernels as _impl
    except ImportError:  # extension not built
        from dlsm import _kernels_py as _impl

BACKEND = _impl.BACKEND
BLOOM_SEED = _impl.BLOOM_SEED

murmur3_32 = _impl.murmur3_32
bloom_params = _impl.bloom_params
bloom_build = _impl.bloom_build
bloom_may_contain = _impl.bloom_may_contain
entry_size = _impl.entry_size
encode_block = _impl.encode_block
decode_block = _impl.decode_block
block_find = _impl.block_find
merge_entries = _impl.merge_entries

__all__ = [
    "BACKEND",
    "BLOOM_SEED",
    "murmur3_32",
    "bloom_params",
    "bloom_build",
    "bloom_may_contain",
    "entry_size",
    "encode_block",
    "decode_block",
    "block_find",
    "merge_entries",
]
