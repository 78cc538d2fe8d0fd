"""Domain-adaptive objectives: masked-token prediction and next-utterance
prediction over encoded dialogue sequences.

The masked-language objective supports three granularities: independent
positions (subword), whole words (every piece of a selected word), and
contiguous spans with truncated-geometric lengths clipped at utterance
boundaries. The next-utterance objective emits one positive and one
negative per context prefix, exactly balanced.

Both objectives train the same toy encoder the ranking model uses; the
token head ties the embedding matrix, the NUP head reads the [CLS]
position through a sigmoid.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import DialogueExample, Utterance, Vocab, encode_example
from .model import build_encoder_params, encode
from .optim import ParamStore, uniform_init, zeros_init

KIND_MLM = 0
KIND_NUP = 1

_UNMASKABLE = (Vocab.PAD, Vocab.CLS, Vocab.SEP, Vocab.MASK)


class ConfigurationError(ValueError):
    pass


@dataclass
class MaskingPolicy:
    level: str                     # subword | whole_word | span
    mask_ratio: float = 0.15
    replace_probs: tuple = (0.8, 0.1, 0.1)   # [MASK] / random token / keep
    span_geometric_p: float = 0.2
    span_max_len: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.level not in ("subword", "whole_word", "span"):
            raise ConfigurationError(f"unknown mask level {self.level!r}")
        if not 0 < self.mask_ratio < 1:
            raise ConfigurationError("mask_ratio must be in (0, 1)")
        if abs(sum(self.replace_probs) - 1.0) > 1e-9:
            raise ConfigurationError("replace_probs must sum to 1")
        if self.span_max_len < 1:
            raise ConfigurationError("span_max_len must be >= 1")


@dataclass
class PosttrainExample:
    kind: int                # KIND_MLM | KIND_NUP
    ids: np.ndarray          # int64, valid prefix of the encoded layout
    targets: list = field(default_factory=list)  # (position, original id)
    label: int = 0           # NUP only


def sample_span_length(rng, p, max_len):
    """Geometric(p) on {1, 2, ...} truncated (by rejection) at max_len."""
    while True:
        length = int(rng.geometric(p))
        if length <= max_len:
            return length


def maskable_positions(ids, valid):
    ids = np.asarray(ids)
    ok = np.asarray(valid, dtype=bool) & ~np.isin(ids, _UNMASKABLE)
    return np.nonzero(ok)[0]


def _word_groups(positions, bounds):
    """Group maskable positions into words via boundary flags."""
    groups = []
    prev = None
    for i in positions:
        if bounds[i] or prev is None or i != prev + 1:
            groups.append([i])
        else:
            groups[-1].append(i)
        prev = i
    return groups


def _select_positions(seq, policy, rng):
    cand = maskable_positions(seq.ids, seq.valid)
    if cand.size == 0:
        return None
    budget = int(np.ceil(policy.mask_ratio * cand.size))
    if policy.level == "subword":
        return sorted(rng.choice(cand, size=budget, replace=False).tolist())
    if policy.level == "whole_word":
        groups = _word_groups(cand, seq.bounds)
        rng.shuffle(groups)
        chosen = []
        for g in groups:
            if len(chosen) >= budget:
                break
            chosen.extend(g)
        return sorted(chosen)
    # span level: anchors grow rightward within one utterance, trimmed to
    # exactly the budget so the realized ratio stays on target
    maskable = set(cand.tolist())
    chosen = set()
    attempts = 0
    while len(chosen) < budget and attempts < 20 * budget:
        attempts += 1
        length = sample_span_length(rng, policy.span_geometric_p, policy.span_max_len)
        anchor = int(rng.choice(cand))
        if anchor in chosen:
            continue
        seg = seq.utt_index[anchor]
        pos = anchor
        added = 0
        while added < length and len(chosen) < budget:
            if pos not in maskable or seq.utt_index[pos] != seg:
                break
            if pos not in chosen:
                chosen.add(pos)
                added += 1
            pos += 1
    if len(chosen) < budget:  # fill-in for pathological sequences
        rest = [p for p in cand.tolist() if p not in chosen]
        rng.shuffle(rest)
        chosen.update(rest[:budget - len(chosen)])
    return sorted(chosen)


def apply_mlm_mask(seq, policy, vocab_size, rng=None):
    """Mask one encoded sequence; None when nothing is maskable."""
    rng = rng if rng is not None else np.random.default_rng(policy.seed)
    selected = _select_positions(seq, policy, rng)
    if selected is None:
        return None
    ids = seq.ids[:seq.n_valid()].copy()
    targets = []
    p_mask, p_rand, _ = policy.replace_probs
    for pos in selected:
        targets.append((int(pos), int(ids[pos])))
        u = rng.random()
        if u < p_mask:
            ids[pos] = Vocab.MASK
        elif u < p_mask + p_rand:
            ids[pos] = int(rng.integers(Vocab.MASK + 1, vocab_size))
    return PosttrainExample(KIND_MLM, ids, targets)


def sample_nup_pairs(utterances, pool, rng, max_len, max_utts=20):
    """Positive/negative next-utterance examples for one dialogue.

    utterances: list of Utterance (the dialogue in order; the k=1 prefix
    is skipped because its context would be empty). pool: corpus-wide
    list of token lists for negatives; needs >= 2 distinct entries.
    """
    distinct = {tuple(p) for p in pool}
    if len(distinct) < 2:
        raise ConfigurationError("negative pool needs >= 2 distinct utterances")
    out = []
    for k in range(2, len(utterances) + 1):
        context = utterances[:k - 1]
        true_next = list(utterances[k - 1].tokens)
        neg = true_next
        while neg == true_next:
            neg = list(pool[int(rng.integers(len(pool)))])
        for cand, label in ((true_next, 1), (neg, 0)):
            ex = DialogueExample(context, [(cand, label)], "pointwise")
            seq = encode_example(ex, 0, max_len, max_utts)
            out.append(PosttrainExample(KIND_NUP, seq.ids[:seq.n_valid()].copy(),
                                        label=label))
    return out


def posttrain_stream(examples, policy, vocab_size, max_len, max_utts=20,
                     seed=0, with_mlm=True, with_nup=True):
    """Deterministic example stream over a corpus of DialogueExamples.

    Uses each example's first candidate as the dialogue's final
    utterance; emits the masked sequence, then the NUP pairs, per
    dialogue.
    """
    rng = np.random.default_rng(seed)
    dialogues = []
    pool = []
    for ex in examples:
        utts = list(ex.context) + [Utterance(1 - ex.context[-1].speaker
                                             if ex.context else 0,
                                             list(ex.candidates[0][0]))]
        dialogues.append(utts)
        pool.extend([list(u.tokens) for u in utts])
    out = []
    for utts in dialogues:
        if with_mlm:
            ctx, resp = utts[:-1], utts[-1]
            ex = DialogueExample(ctx, [(list(resp.tokens), 1)], "pointwise")
            seq = encode_example(ex, 0, max_len, max_utts)
            masked = apply_mlm_mask(seq, policy, vocab_size, rng)
            if masked is not None:
                out.append(masked)
        if with_nup and len(utts) >= 2:
            out.extend(sample_nup_pairs(utts, pool, rng, max_len, max_utts))
    return out


# ---------------------------------------------------------------------------
# losses (token-level, [CLS]-level, and their sum)

def mlm_loss(token_logits, target_ids):
    """Mean cross-entropy over the masked positions."""
    if len(target_ids) == 0:
        return Tensor(np.zeros((), dtype=ag.default_dtype()))
    return ag.mean_all(ag.softmax_cross_entropy(token_logits, target_ids))


def nup_loss(cls_prob, labels):
    """Binary cross-entropy on the [CLS]-head probability."""
    return ag.mean_all(ag.binary_cross_entropy(cls_prob, labels))


def combined_loss(intra, inter):
    """Unweighted sum of the two objectives."""
    return ag.add(intra, inter)


# ---------------------------------------------------------------------------
# model surface

def build_posttrain_params(config, rng):
    """Encoder (same layout as the ranking model) plus the two heads."""
    store = ParamStore()
    build_encoder_params(store, config, rng)
    store.add("head.mlm_bias", zeros_init((config.vocab_size,)))
    store.add("head.nup.w", uniform_init(rng, (config.d, 1), fan_in=config.d))
    store.add("head.nup.b", zeros_init((1,)))
    return store


def forward_mlm(store, config, ids, valid, positions, rng=None):
    """Token logits at the flat masked positions: [M, vocab]."""
    E = encode(store, config, ids, valid, rng)
    N, l = ids.shape
    flat = ag.reshape(E, (N * l, config.d))
    sel = ag.index_rows(flat, positions)
    return ag.add(ag.matmul(sel, store["encoder.tok_emb"], transpose_b=True),
                  store["head.mlm_bias"])


def forward_nup(store, config, ids, valid, rng=None):
    """[CLS] -> fully-connected -> sigmoid: probability the candidate follows."""
    E = encode(store, config, ids, valid, rng)
    cls = ag.select_position(E, 0)
    logit = ag.add(ag.matmul(cls, store["head.nup.w"]), store["head.nup.b"])
    return ag.sigmoid(ag.reshape(logit, (ids.shape[0],)))


# ---------------------------------------------------------------------------
# emitted example file: length-prefixed binary records

def write_examples(path, examples):
    """kind u8 | id count u32 | ids i32* | target count u32 |
    (pos u32, id i32)* | label u8 -- each record u32-length-prefixed,
    all little-endian."""
    with open(path, "wb") as fh:
        for ex in examples:
            payload = struct.pack("<BI", ex.kind, len(ex.ids))
            payload += np.asarray(ex.ids, dtype="<i4").tobytes()
            payload += struct.pack("<I", len(ex.targets))
            for pos, tid in ex.targets:
                payload += struct.pack("<Ii", pos, tid)
            payload += struct.pack("<B", ex.label)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def read_examples(path):
    out = []
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                return out
            (size,) = struct.unpack("<I", head)
            payload = fh.read(size)
            if len(payload) != size:
                raise ValueError(f"{path}: truncated record")
            kind, n_ids = struct.unpack_from("<BI", payload, 0)
            off = 5
            ids = np.frombuffer(payload, dtype="<i4", count=n_ids, offset=off)
            off += 4 * n_ids
            (n_t,) = struct.unpack_from("<I", payload, off)
            off += 4
            targets = []
            for _ in range(n_t):
                pos, tid = struct.unpack_from("<Ii", payload, off)
                targets.append((pos, tid))
                off += 8
            (label,) = struct.unpack_from("<B", payload, off)
            out.append(PosttrainExample(kind, ids.astype(np.int64), targets, label))
