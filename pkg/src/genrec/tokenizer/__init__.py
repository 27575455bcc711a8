"""Byte-level BPE tokenizer.

The merge kernels come from the compiled ``_kernels`` extension when it is
built, else from the pure-Python ``_kernels_py``.  Set ``GENREC_PURE_PYTHON=1``
to force the fallback.
"""

from __future__ import annotations

import os

if os.environ.get("GENREC_PURE_PYTHON"):
    from . import _kernels_py as kernels
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as kernels

from .bpe import (
    BOS_ID,
    EOS_ID,
    MIN_VOCAB_SIZE,
    PAD_ID,
    BPETokenizer,
    TokenizerError,
    decode,
    encode,
    offset_to_token_index,
    pre_split,
    train_tokenizer,
)

KERNEL_BACKEND: str = kernels.BACKEND

__all__ = [
    "BOS_ID",
    "EOS_ID",
    "KERNEL_BACKEND",
    "MIN_VOCAB_SIZE",
    "PAD_ID",
    "BPETokenizer",
    "TokenizerError",
    "decode",
    "encode",
    "kernels",
    "offset_to_token_index",
    "pre_split",
    "train_tokenizer",
]
