"""One-number reproducibility: every random stream is derived from the
top-level seed plus string/int tags, e.g. ``derive_seed(seed, "synth", sample_id)``."""
import hashlib


def derive_seed(seed: int, *tags) -> int:
    key = ":".join([str(int(seed))] + [str(t) for t in tags])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
