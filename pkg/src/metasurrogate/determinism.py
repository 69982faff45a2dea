"""Seed derivation and deterministic-backend helpers.

Every random draw in the package flows through an explicit ``torch.Generator``
seeded either directly or via ``derive_seed``, so a single master seed pins the
whole pipeline.
"""

import hashlib
import json

import torch


def enable_determinism() -> None:
    """Force deterministic kernel selection in the numeric backend."""
    torch.use_deterministic_algorithms(True)


def derive_seed(master: int, *scope: object) -> int:
    """Derive a stable sub-seed from a master seed and a scope path.

    The same (master, scope) pair always yields the same seed, and distinct
    scopes yield independent streams.
    """
    tag = "/".join(str(s) for s in (master, *scope))
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def generator(seed: int) -> torch.Generator:
    """CPU random generator seeded with `seed`."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(seed)
    return gen


def config_hash(obj) -> str:
    """Stable hex digest of a JSON-serializable configuration object."""
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
