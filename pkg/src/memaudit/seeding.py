"""Deterministic 64-bit seed derivation shared across modules."""

_GOLD = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def splitmix_next(state: int):
    """One splitmix64 step: returns (advanced state, output)."""
    state = (state + _GOLD) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def derive_seed(*parts) -> int:
    """Deterministic 64-bit seed from integer parts (splitmix64 chaining)."""
    state = 0x243F6A8885A308D3
    for p in parts:
        _, z = splitmix_next(state ^ (int(p) & _MASK))
        state = z
    return state
