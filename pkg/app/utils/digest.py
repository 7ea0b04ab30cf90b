"""파라미터 무결성 digest

체크포인트에 저장된 파라미터 배열의 SHA-256 digest.
이름 순으로 (이름, shape, float64 바이트)를 이어서 해시한다.
"""
from typing import Mapping

import numpy as np
from cryptography.hazmat.primitives import hashes


def parameter_digest(arrays: Mapping[str, np.ndarray]) -> str:
    """
    파라미터 dict의 SHA-256 hex digest

    Args:
        arrays: 파라미터 이름 → 배열

    Returns:
        64자리 hex 문자열
    """
    digest = hashes.Hash(hashes.SHA256())
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name], dtype=np.float64)
        digest.update(name.encode("utf-8"))
        digest.update(repr(tuple(array.shape)).encode("ascii"))
        digest.update(array.tobytes())
    return digest.finalize().hex()
