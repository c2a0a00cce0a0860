"""Key/value limits.

An entry is a ``(key, seq, value)`` tuple; ``value is None`` is a tombstone,
which is distinct from the empty value ``b""``.
"""

from dlsm.errors import InvalidKey

MAX_KEY_LEN = 4096
MAX_VALUE_LEN = 1 << 20
MAX_SEQ = (1 << 64) - 1


def validate_key(key) -> bytes:
    if not isinstance(key, (bytes, bytearray)):
        raise InvalidKey(f"key must be bytes, got {type(key).__name__}")
    if not 1 <= len(key) <= MAX_KEY_LEN:
        raise InvalidKey(f"key length {len(key)} outside 1..{MAX_KEY_LEN}")
    return bytes(key)


def validate_value(value):
    if value is None:
        return None
    if not isinstance(value, (bytes, bytearray)):
        raise InvalidKey(f"value must be bytes or None, got {type(value).__name__}")
    if len(value) > MAX_VALUE_LEN:
        raise InvalidKey(f"value length {len(value)} exceeds {MAX_VALUE_LEN}")
    return bytes(value)
