"""Independent reimplementation of the documented hashing featurizer.

tokens  = maximal runs of alphanumeric characters of the lowercased text
grams   = unigrams, then bigrams joined by a single space
h       = FNV-1a 64 over (seed as 8 little-endian bytes) ++ utf8(gram)
bucket  = h mod dim, sign = +1 if bit 63 of h is 0 else -1
row     = L2-normalized bucket sums
"""
import math
import sys

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK = (1 << 64) - 1


def fnv1a(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK
    return h


def tokens(text):
    out, cur = [], []
    for ch in text.lower():
        if ch.isalnum():
            cur.append(ch)
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


def featurize(text, dim, seed):
    toks = tokens(text)
    grams = toks + [a + " " + b for a, b in zip(toks, toks[1:])]
    row = [0.0] * dim
    for g in grams:
        h = fnv1a(seed.to_bytes(8, "little") + g.encode("utf-8"))
        row[h % dim] += -1.0 if (h >> 63) & 1 else 1.0
    norm = math.sqrt(sum(v * v for v in row))
    return [v / norm for v in row] if norm > 0 else row


if __name__ == "__main__":
    text = sys.argv[1] if len(sys.argv) > 1 else "The quick brown fox jumps over the lazy dog!"
    print([repr(v) for v in featurize(text, 16, 0)])
