# SPDX-License-Identifier: Apache-2.0
"""Second implementation of the corpus generator, written from the token and
PRNG definitions only. Used to check that jsonl corpora are byte-identical
across implementations."""
import argparse
import json
import math
import os

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

PAD, BOS, EOS, SEP, TRUE, FALSE, CLAIM, EVID, NONE, P_SUBJ, P_REL, P_OBJ = range(12)
ENT, N_ENT, REL, N_REL = 16, 16, 32, 8
KINDS = ["diff", "entity", "correct", "factcheck"]
SPECIAL = ["PAD", "BOS", "EOS", "SEP", "TRUE", "FALSE", "CLAIM", "EVID", "NONE", "P_SUBJ", "P_REL", "P_OBJ",
           "OP_COPY", "OP_RECALL", "OP_SORT", "OP_WHO"]


def splitmix(state):
    state = (state + GOLDEN) & MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return state, z ^ (z >> 31)


def rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK


class Xoshiro:
    def __init__(self, seed):
        self.s = []
        st = seed & MASK
        for _ in range(4):
            st, v = splitmix(st)
            self.s.append(v)

    def next(self):
        s = self.s
        out = (rotl((s[0] + s[3]) & MASK, 23) + s[0]) & MASK
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        return out

    def uniform(self):
        return (self.next() >> 11) * 2.0 ** -53

    def below(self, n):
        return int(math.floor(self.uniform() * n))


def name(t):
    if t < 16:
        return SPECIAL[t]
    if t < 32:
        return "E%d" % (t - 16)
    if t < 40:
        return "R%d" % (t - 32)
    if t < 48:
        return "F%d" % (t - 40)
    return "OP_HAS" if t == 48 else "RSV%d" % t


def evidence(rng, k):
    facts = []
    for _ in range(k):
        while True:
            s = ENT + rng.below(N_ENT)
            if all(f[0] != s for f in facts):
                break
        while True:
            r = REL + rng.below(N_REL)
            o = ENT + rng.below(N_ENT)
            if all((f[1], f[2]) != (r, o) for f in facts):
                break
        facts.append((s, r, o))
    return facts


def claim(rng, facts, forced):
    label = forced if forced is not None else ("TRUE" if rng.uniform() < 0.5 else "FALSE")
    c = list(facts[rng.below(len(facts))])
    if label == "FALSE":
        slot = rng.below(3)
        if slot == 0:
            pool = [ENT + e for e in range(N_ENT) if all(f[0] != ENT + e for f in facts)]
        elif slot == 1:
            pool = [REL + r for r in range(N_REL) if REL + r != c[1]]
        else:
            pool = [ENT + e for e in range(N_ENT) if ENT + e != c[2]]
        c[slot] = pool[rng.below(len(pool))]
    return tuple(c), label


def target(kind, c, facts):
    if kind == "factcheck":
        return [TRUE if c in facts else FALSE, EOS]
    gold = next((f for f in facts if f[0] == c[0]), None) or next(f for f in facts if f[1:] == c[1:])
    if kind == "correct":
        return list(gold) + [EOS]
    if kind == "diff":
        if c in facts:
            return [NONE, EOS]
        for marker, a, b in zip((P_SUBJ, P_REL, P_OBJ), c, gold):
            if a != b:
                return [marker, a, b, EOS]
    ents = {f[0] for f in facts} | {f[2] for f in facts}
    return sorted({c[0], c[2]} & ents) + [EOS]


def corpus(kind, n, seed, ratios=(0.8, 0.1, 0.1)):
    n_train = int(math.floor(n * ratios[0] + 0.5))
    n_dev = int(math.floor(n * ratios[1] + 0.5))
    rng = Xoshiro(seed ^ ((GOLDEN * (KINDS.index(kind) + 1)) & MASK))
    out = {}
    for split, count in (("train", n_train), ("dev", n_dev), ("test", n - n_train - n_dev)):
        rows = []
        for i in range(count):
            facts = evidence(rng, 2 + rng.below(3))
            forced = ("TRUE" if i % 2 == 0 else "FALSE") if kind == "factcheck" else None
            c, label = claim(rng, facts, forced)
            inp = [BOS, CLAIM, *c, EVID]
            for f in facts:
                inp += [*f, SEP]
            tgt = target(kind, c, facts)
            text = " ".join(name(t) for t in inp) + " =>" + "".join(" " + name(t) for t in tgt)
            rows.append(json.dumps({"kind": kind, "input_tokens": inp, "target_tokens": tgt, "label": label,
                                    "text": text}, separators=(",", ":")))
        out[split] = rows
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--task", required=True)
    ap.add_argument("--n", type=int, required=True)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--out", required=True)
    a = ap.parse_args()
    os.makedirs(a.out, exist_ok=True)
    for kind in KINDS if a.task == "all" else [a.task]:
        for split, rows in corpus(kind, a.n, a.seed).items():
            with open(os.path.join(a.out, "%s.%s.jsonl" % (kind, split)), "w", newline="\n") as fh:
                fh.write("".join(r + "\n" for r in rows))


if __name__ == "__main__":
    main()
