from __future__ import annotations

import contextlib
import hashlib
import json
from typing import Any, Iterator

import torch


@contextlib.contextmanager
def seeded(seed: int, deterministic: bool = True) -> Iterator[None]:
    """Run a block with the global torch RNG seeded, restoring it afterwards.

    With ``deterministic`` the block also runs under
    ``torch.use_deterministic_algorithms``.
    """
    prev = torch.are_deterministic_algorithms_enabled()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if deterministic:
            torch.use_deterministic_algorithms(True)
        try:
            yield
        finally:
            torch.use_deterministic_algorithms(prev)


def config_hash(obj: Any, length: int = 12) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:length]
