"""Rebuilds vocab.json / merges.txt from the r50k_base (GPT-2) tiktoken rank file.

usage: python3 from_tiktoken.py r50k_base.tiktoken
Token ids equal ranks; merge k produces token 256 + k.
"""
import base64
import json
import sys


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


ranks = {}
for line in open(sys.argv[1]):
    if line.strip():
        tok, rank = line.split()
        ranks[base64.b64decode(tok)] = int(rank)

enc = bytes_to_unicode()
u = lambda b: "".join(enc[x] for x in b)
vocab = {u(t): r for t, r in ranks.items()}
vocab["<|endoftext|>"] = 50256

by_rank = {r: t for t, r in ranks.items()}
merges = []
for r in range(256, 50256):
    parts = [bytes([x]) for x in by_rank[r]]
    while len(parts) > 2:
        best = min(
            (ranks[parts[i] + parts[i + 1]], i)
            for i in range(len(parts) - 1)
            if ranks.get(parts[i] + parts[i + 1], r) < r
        )
        i = best[1]
        parts = parts[:i] + [parts[i] + parts[i + 1]] + parts[i + 2:]
    merges.append(u(parts[0]) + " " + u(parts[1]))

json.dump(vocab, open("vocab.json", "w"), ensure_ascii=False)
open("merges.txt", "w").write("#version: 0.2\n" + "\n".join(merges) + "\n")
