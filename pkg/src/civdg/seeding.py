"""Seed derivation.

``mix(*parts)`` folds integers into one 64-bit seed:

    h = 0
    for p in parts:
        h = splitmix64(h XOR (p mod 2**64))

with the standard splitmix64 finaliser (increment 0x9E3779B97F4A7C15,
multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB, shifts 30/27/31).
Strings are folded as the integer value of their UTF-8 bytes (big endian).
"""

MASK = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def _as_int(part):
    if isinstance(part, str):
        return int.from_bytes(part.encode("utf-8"), "big")
    return int(part)


def mix(*parts):
    h = 0
    for p in parts:
        h = splitmix64(h ^ (_as_int(p) & MASK))
    return h
