"""Deterministic generators of desk-scale multichoice ranking tasks.

Each task makes one channel family causally necessary:

speaker_echo -- speakers take turns in random runs (not strict
alternation) and every utterance is a fresh keyword. The correct
response repeats the keyword last uttered by the RESPONDER themselves
(the party opposite the final context utterance); the main distractor
repeats the other party's last keyword. Who-said-what is only
observable through the same/other-speaker structure, and the random run
lengths stop utterance position from standing in for speaker identity.

utterance_order -- two marker utterances carry payload keywords at
random positions; the correct response is the LATER marker's payload,
the main distractor the earlier one's. Utterance content is symmetric,
so only sequence order separates them.

Candidates are all single keywords, so length gives nothing away, and
the gold slot is uniform. Output records use the same structured-text
multichoice format the corpus loader ingests.
"""

import json
from dataclasses import dataclass

import numpy as np

MARKER = "mm"


@dataclass
class SyntheticSpec:
    task: str                 # speaker_echo | utterance_order
    vocab_size: int = 60
    n_utts: int = 6
    n_candidates: int = 4
    n_train: int = 2000
    n_dev: int = 500
    seed: int = 0
    stay_prob: float = 0.5    # speaker persistence between turns (speaker_echo)

    def __post_init__(self):
        if self.task not in ("speaker_echo", "utterance_order"):
            raise ValueError(f"unknown synthetic task {self.task!r}")
        if self.n_candidates < 2:
            raise ValueError("n_candidates must be >= 2")
        if self.vocab_size < 20:
            raise ValueError("vocab_size must be >= 20")
        if self.n_utts < 3:
            raise ValueError("n_utts must be >= 3")


def _keywords(rng, spec, n):
    picks = rng.choice(spec.vocab_size, size=n, replace=False)
    return [f"k{int(i)}" for i in picks]


def _role_runs(rng, spec):
    """Role sequence starting at 0 with random persistence; both present."""
    while True:
        roles = [0]
        for _ in range(spec.n_utts - 1):
            stay = rng.random() < spec.stay_prob
            roles.append(roles[-1] if stay else 1 - roles[-1])
        if len(set(roles)) == 2:
            return roles


def _fill_candidates(rng, spec, gold, main_distractor, used):
    """Gold + main distractor + fresh keywords, gold slot uniform."""
    cands = [gold, main_distractor]
    while len(cands) < spec.n_candidates:
        kw = f"k{int(rng.integers(spec.vocab_size))}"
        if kw not in used and kw not in cands:
            cands.append(kw)
    rest = cands[1:]
    rng.shuffle(rest)
    slot = int(rng.integers(spec.n_candidates))
    options = rest[:slot] + [gold] + rest[slot:]
    return options, slot


def _echo_record(rng, spec):
    roles = _role_runs(rng, spec)
    kws = _keywords(rng, spec, spec.n_utts)
    responder = 1 - roles[-1]
    own = [k for r, k in zip(roles, kws) if r == responder]
    other = [k for r, k in zip(roles, kws) if r != responder]
    gold, distractor = own[-1], other[-1]
    options, slot = _fill_candidates(rng, spec, gold, distractor, set(kws))
    tags = ["f" if r == 0 else "m" for r in roles]
    article = " ".join(f"{t} : {k}" for t, k in zip(tags, kws))
    return {"article": article, "options": options,
            "answers": chr(ord("A") + slot)}


def _order_record(rng, spec):
    kws = _keywords(rng, spec, 2 * spec.n_utts + 2)
    fillers, payloads = kws[:2 * spec.n_utts], kws[2 * spec.n_utts:]
    i, j = sorted(rng.choice(spec.n_utts, size=2, replace=False))
    texts = []
    for t in range(spec.n_utts):
        if t == i:
            texts.append(f"{MARKER} {payloads[0]}")
        elif t == j:
            texts.append(f"{MARKER} {payloads[1]}")
        else:
            texts.append(f"{fillers[2 * t]} {fillers[2 * t + 1]}")
    gold, distractor = payloads[1], payloads[0]  # later marker wins
    options, slot = _fill_candidates(rng, spec, gold, distractor, set(kws))
    tags = ["f" if t % 2 == 0 else "m" for t in range(spec.n_utts)]
    article = " ".join(f"{t} : {x}" for t, x in zip(tags, texts))
    return {"article": article, "options": options,
            "answers": chr(ord("A") + slot)}


def gen_records(spec, split="train"):
    """The full record list for one split, fixed by (seed, split)."""
    n = spec.n_train if split == "train" else spec.n_dev
    child = {"train": 0, "dev": 1}[split]
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[child])
    make = _echo_record if spec.task == "speaker_echo" else _order_record
    return [make(rng, spec) for _ in range(n)]


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def generate(spec, out_dir):
    """Write train.jsonl and dev.jsonl under out_dir; returns the paths."""
    paths = {}
    for split in ("train", "dev"):
        path = out_dir / f"{split}.jsonl" if hasattr(out_dir, "joinpath") else \
            f"{out_dir}/{split}.jsonl"
        write_jsonl(path, gen_records(spec, split))
        paths[split] = path
    return paths
